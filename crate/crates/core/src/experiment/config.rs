use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gfdt::{Perturbation, TruthProtocol};
use crate::maxent::StartStrategy;
use crate::nn::{ConvNetworkSpec, TrainConfig};
use crate::score::dsm::{DsmConfig, DsmNetwork};
use crate::score::kgmm::KgmmConfig;
use crate::sde::{BarotropicParams, Normalization, ScalarParams, TriadParams};
use crate::spectral::{pixel_perturbation, NsParams};
use crate::{Error, Result};

/// Largest state dimension for which clustering-based estimation is
/// accepted.
pub const KGMM_MAX_DIM: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    Scalar {
        #[serde(default)]
        params: ScalarParams,
    },
    Triad {
        #[serde(default)]
        params: TriadParams,
    },
    Barotropic {
        #[serde(default)]
        params: BarotropicParams,
    },
    NavierStokes {
        #[serde(default)]
        params: NsParams,
        /// RMS of the random initial vorticity.
        init_amplitude: f64,
    },
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Scalar { .. } => "scalar",
            ModelConfig::Triad { .. } => "triad",
            ModelConfig::Barotropic { .. } => "barotropic",
            ModelConfig::NavierStokes { .. } => "navier-stokes",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelConfig::Scalar { .. } => 1,
            ModelConfig::Triad { .. } => 3,
            ModelConfig::Barotropic { .. } => 6,
            ModelConfig::NavierStokes { params, .. } => params.grid * params.grid,
        }
    }

    pub fn is_grid(&self) -> bool {
        matches!(self, ModelConfig::NavierStokes { .. })
    }
}

/// Time stepping and storage of the unperturbed run. Rows are stored every
/// `stride` steps after `burn_in` time units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub dt: f64,
    pub burn_in: f64,
    pub stride: usize,
    pub rows: usize,
}

impl SimulationConfig {
    pub fn sample_interval(&self) -> f64 {
        self.dt * self.stride as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum ScoreMethod {
    Kgmm(KgmmConfig),
    Dsm {
        dsm: DsmConfig,
        /// Rescale and shift the learned score so the `g = 1` and `g = x_i`
        /// integration-by-parts identities hold on the training corpus.
        #[serde(default)]
        affine_correction: bool,
    },
    /// Only the Gaussian approximation.
    Gaussian,
}

impl ScoreMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreMethod::Kgmm(_) => "kgmm",
            ScoreMethod::Dsm { .. } => "dsm",
            ScoreMethod::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Training samples, taken as evenly spaced rows of the unperturbed run.
    pub samples: usize,
    #[serde(flatten)]
    pub method: ScoreMethod,
}

/// Forcing direction. `unit` and `pixel` are given in normalized
/// coordinates, the others in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PerturbationConfig {
    Unit { component: usize },
    Pixel { ix: usize, iy: usize, amplitude: f64 },
    Constant { direction: Vec<f64> },
    Affine { matrix: Vec<f64>, offset: Vec<f64> },
    TriadDamping { delta: f64 },
}

impl PerturbationConfig {
    /// The forcing in physical coordinates.
    pub fn resolve(&self, model: &ModelConfig, norm: &Normalization) -> Result<Perturbation> {
        let dim = model.dim();
        let p = match self {
            PerturbationConfig::Unit { component } => Perturbation::unit(dim, *component)?.to_physical(norm)?,
            PerturbationConfig::Pixel { ix, iy, amplitude } => match model {
                ModelConfig::NavierStokes { params, .. } => {
                    pixel_perturbation(params.grid, *ix, *iy, *amplitude)?.to_physical(norm)?
                }
                _ => return Err(Error::InvalidParameter("pixel perturbations need a grid model".into())),
            },
            PerturbationConfig::Constant { direction } => Perturbation::constant(direction.clone()),
            PerturbationConfig::Affine { matrix, offset } => Perturbation::affine(matrix.clone(), offset.clone())?,
            PerturbationConfig::TriadDamping { delta } => {
                if !matches!(model, ModelConfig::Triad { .. }) {
                    return Err(Error::InvalidParameter("damping perturbation applies to the triad model only".into()));
                }
                Perturbation::triad_damping(*delta)
            }
        };
        if p.dim != dim {
            return Err(Error::dim("perturbation", dim, p.dim));
        }
        Ok(p)
    }
}

/// Central moments `(x_i − μ_i)^n` of normalized components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableConfig {
    /// Empty means every component.
    #[serde(default)]
    pub components: Vec<usize>,
    pub orders: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseConfig {
    pub max_lag: f64,
    /// Lag spacing in stored rows.
    pub lag_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    pub members: usize,
    pub epsilon: f64,
    pub protocol: TruthProtocol,
    /// Unperturbed spin-up of each member before the split.
    pub burn_in: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub dt: f64,
    pub steps: usize,
    pub burn_in: f64,
    pub stride: usize,
    /// Histogram bins; Freedman–Diaconis when absent.
    #[serde(default)]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxentStageConfig {
    pub component: usize,
    /// Forcing amplitudes applied as a constant-in-time step.
    pub epsilons: Vec<f64>,
    pub n_moments: usize,
    pub starts: StartStrategy,
    /// Time at which the stepped response is read off as the new steady state.
    pub horizon: f64,
    /// Response method the moment changes come from.
    pub source: String,
    #[serde(default = "default_points")]
    pub density_points: usize,
}

fn default_points() -> usize {
    401
}

fn default_reduced() -> usize {
    10_000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub simulation: SimulationConfig,
    pub score: ScoreConfig,
    /// Also run the Gaussian approximation.
    #[serde(default = "default_true")]
    pub gaussian: bool,
    pub perturbation: PerturbationConfig,
    pub observables: ObservableConfig,
    pub response: ResponseConfig,
    #[serde(default)]
    pub truth: Option<TruthConfig>,
    #[serde(default)]
    pub langevin: Option<LangevinConfig>,
    #[serde(default)]
    pub maxent: Option<MaxentStageConfig>,
    /// Train the score on `reduced_samples` samples instead of
    /// `score.samples`, with every other setting unchanged.
    #[serde(default)]
    pub reduced_data: bool,
    #[serde(default = "default_reduced")]
    pub reduced_samples: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Training sample count after the reduced-data switch.
    pub fn training_samples(&self) -> usize {
        if self.reduced_data {
            self.reduced_samples
        } else {
            self.score.samples
        }
    }

    pub fn components(&self) -> Vec<usize> {
        if self.observables.components.is_empty() {
            (0..self.model.dim()).collect()
        } else {
            self.observables.components.clone()
        }
    }

    /// Whether the model has a closed-form score.
    pub fn has_analytic_score(&self) -> bool {
        matches!(self.model, ModelConfig::Scalar { .. })
    }

    /// Replaces the master seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        match &mut self.score.method {
            ScoreMethod::Kgmm(k) => {
                k.seed = seed;
                k.network.seed = seed;
                k.train.seed = seed;
            }
            ScoreMethod::Dsm { dsm, .. } => {
                dsm.train.seed = seed;
                match &mut dsm.network {
                    DsmNetwork::Dense(s) => s.seed = seed,
                    DsmNetwork::Conv(s) => s.seed = seed,
                }
            }
            ScoreMethod::Gaussian => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let dim = self.model.dim();
        match &self.model {
            ModelConfig::Scalar { params } => params.validate()?,
            ModelConfig::Triad { params } => params.validate()?,
            ModelConfig::Barotropic { params } => params.validate()?,
            ModelConfig::NavierStokes { params, .. } => params.validate()?,
        }
        let sim = &self.simulation;
        if !(sim.dt > 0.0) || sim.stride == 0 || sim.rows == 0 || !(sim.burn_in >= 0.0) {
            return bad("simulation needs dt > 0, stride ≥ 1, rows ≥ 1 and burn-in ≥ 0".into());
        }
        let n = self.training_samples();
        if n == 0 || n > sim.rows {
            return bad(format!("{n} training samples requested from {} rows", sim.rows));
        }
        match &self.score.method {
            ScoreMethod::Kgmm(k) => {
                if self.model.is_grid() || dim > KGMM_MAX_DIM {
                    return bad(format!(
                        "clustering score estimation is limited to {KGMM_MAX_DIM} dimensions; use dsm for {}",
                        self.model.name()
                    ));
                }
                k.validate(n)?;
                if k.network.layer_widths.first() != Some(&dim) || k.network.layer_widths.last() != Some(&dim) {
                    return Err(Error::dim("score network width", dim, k.network.layer_widths[0]));
                }
            }
            ScoreMethod::Dsm { dsm, .. } => match &dsm.network {
                DsmNetwork::Dense(s) => {
                    s.validate()?;
                    if s.layer_widths.first() != Some(&dim) || s.layer_widths.last() != Some(&dim) {
                        return Err(Error::dim("score network width", dim, s.layer_widths[0]));
                    }
                }
                DsmNetwork::Conv(s) => {
                    s.validate()?;
                    if !self.model.is_grid() || s.grid_size * s.grid_size != dim {
                        return bad("convolutional score networks need a grid model of matching size".into());
                    }
                }
            },
            ScoreMethod::Gaussian => {}
        }
        if let PerturbationConfig::TriadDamping { .. } = self.perturbation {
            if !matches!(self.model, ModelConfig::Triad { .. }) {
                return bad("damping perturbation applies to the triad model only".into());
            }
        }
        if let PerturbationConfig::Unit { component } = self.perturbation {
            if component >= dim {
                return bad(format!("perturbed component {component} outside dimension {dim}"));
            }
        }
        if self.observables.orders.is_empty() || self.observables.orders.contains(&0) {
            return bad("observable orders must be non-empty and positive".into());
        }
        if let Some(c) = self.components().iter().find(|&&c| c >= dim) {
            return bad(format!("observed component {c} outside dimension {dim}"));
        }
        if self.model.is_grid() && self.observables.components.is_empty() {
            return bad("grid models need an explicit list of observed components".into());
        }
        if !(self.response.max_lag >= 0.0) || self.response.lag_stride == 0 {
            return bad("response needs max_lag ≥ 0 and lag_stride ≥ 1".into());
        }
        if let Some(t) = &self.truth {
            if self.model.is_grid() {
                return bad("ensemble truth is available for the reduced-order models only".into());
            }
            if t.members == 0 || t.members > sim.rows || !(t.epsilon > 0.0) {
                return bad("truth needs 1 ≤ members ≤ rows and epsilon > 0".into());
            }
        }
        if let Some(l) = &self.langevin {
            if !(l.dt > 0.0) || l.steps == 0 || l.stride == 0 || l.bins == Some(0) {
                return bad("langevin needs dt > 0, steps ≥ 1, stride ≥ 1 and bins ≥ 1".into());
            }
        }
        if let Some(m) = &self.maxent {
            if m.n_moments > crate::maxent::MAX_ORDER {
                return bad(format!("maxent supports at most {} moments", crate::maxent::MAX_ORDER));
            }
            if !self.components().contains(&m.component) {
                return bad(format!("maxent component {} is not observed", m.component));
            }
            if let Some(o) = (1..=m.n_moments as u32).find(|o| !self.observables.orders.contains(o)) {
                return bad(format!("maxent with {} moments needs order {o} among the observables", m.n_moments));
            }
            if !(m.horizon > 0.0 && m.horizon <= self.response.max_lag) {
                return bad("maxent horizon must lie within the response lags".into());
            }
        }
        Ok(())
    }

    /// Built-in settings per model: `scalar`, `triad`, `barotropic`,
    /// `navier-stokes`.
    pub fn preset(name: &str) -> Result<Self> {
        let seed = 1;
        let orders = vec![1, 2, 3, 4];
        let config = match name {
            "scalar" => ExperimentConfig {
                name: "scalar".into(),
                seed,
                model: ModelConfig::Scalar {
                    params: ScalarParams::default(),
                },
                simulation: SimulationConfig {
                    dt: 0.01,
                    burn_in: 100.0,
                    stride: 10,
                    rows: 10_000_000,
                },
                score: ScoreConfig {
                    samples: 1_000_000,
                    method: ScoreMethod::Kgmm(KgmmConfig::new(1, 0.05, 348, seed)),
                },
                gaussian: true,
                perturbation: PerturbationConfig::Constant { direction: vec![1.0] },
                observables: ObservableConfig {
                    components: vec![],
                    orders,
                },
                response: ResponseConfig {
                    max_lag: 30.0,
                    lag_stride: 1,
                },
                truth: None,
                langevin: Some(LangevinConfig {
                    dt: 0.01,
                    steps: 1_000_000,
                    burn_in: 10.0,
                    stride: 1,
                    bins: None,
                }),
                maxent: Some(MaxentStageConfig {
                    component: 0,
                    epsilons: vec![0.02, 0.04, 0.06, 0.08, 0.1, 0.12],
                    n_moments: 4,
                    starts: StartStrategy::MultiStart,
                    horizon: 30.0,
                    source: "gfdt-neural".into(),
                    density_points: default_points(),
                }),
                reduced_data: false,
                reduced_samples: default_reduced(),
            },
            "triad" => ExperimentConfig {
                name: "triad".into(),
                seed,
                model: ModelConfig::Triad {
                    params: TriadParams::default(),
                },
                simulation: SimulationConfig {
                    dt: 0.01,
                    burn_in: 100.0,
                    stride: 50,
                    rows: 1_000_000,
                },
                score: ScoreConfig {
                    samples: 1_000_000,
                    method: ScoreMethod::Kgmm(KgmmConfig::new(3, 0.05, 7353, seed)),
                },
                gaussian: true,
                perturbation: PerturbationConfig::TriadDamping { delta: -0.4 },
                observables: ObservableConfig {
                    components: vec![],
                    orders,
                },
                response: ResponseConfig {
                    max_lag: 30.0,
                    lag_stride: 1,
                },
                truth: Some(TruthConfig {
                    members: 4096,
                    epsilon: 0.05,
                    protocol: TruthProtocol::Impulse,
                    burn_in: 10.0,
                }),
                langevin: Some(LangevinConfig {
                    dt: 0.01,
                    steps: 1_000_000,
                    burn_in: 10.0,
                    stride: 1,
                    bins: None,
                }),
                maxent: None,
                reduced_data: false,
                reduced_samples: default_reduced(),
            },
            "barotropic" => ExperimentConfig {
                name: "barotropic".into(),
                seed,
                model: ModelConfig::Barotropic {
                    params: BarotropicParams::default(),
                },
                simulation: SimulationConfig {
                    dt: 0.01,
                    burn_in: 200.0,
                    stride: 50,
                    rows: 1_000_000,
                },
                score: ScoreConfig {
                    samples: 1_000_000,
                    method: ScoreMethod::Kgmm(KgmmConfig::new(6, 0.05, 30309, seed).with_interpolant(&[128, 64], 128, 300)),
                },
                gaussian: true,
                perturbation: PerturbationConfig::Unit { component: 0 },
                observables: ObservableConfig {
                    components: vec![],
                    orders,
                },
                response: ResponseConfig {
                    max_lag: 30.0,
                    lag_stride: 1,
                },
                truth: Some(TruthConfig {
                    members: 4096,
                    epsilon: 0.1,
                    protocol: TruthProtocol::Impulse,
                    burn_in: 10.0,
                }),
                langevin: Some(LangevinConfig {
                    dt: 0.01,
                    steps: 1_000_000,
                    burn_in: 10.0,
                    stride: 1,
                    bins: None,
                }),
                maxent: None,
                reduced_data: false,
                reduced_samples: default_reduced(),
            },
            "navier-stokes" => {
                let grid = 32;
                let center = grid / 2;
                ExperimentConfig {
                    name: "navier-stokes".into(),
                    seed,
                    model: ModelConfig::NavierStokes {
                        params: NsParams::default(),
                        init_amplitude: 1.0,
                    },
                    simulation: SimulationConfig {
                        dt: 0.01,
                        burn_in: 100.0,
                        stride: 50,
                        rows: 100_000,
                    },
                    score: ScoreConfig {
                        samples: 100_000,
                        method: ScoreMethod::Dsm {
                            dsm: DsmConfig {
                                train: TrainConfig {
                                    final_learning_rate: Some(1e-5),
                                    ..TrainConfig::new(64, 500, 1e-3, seed)
                                },
                                ..DsmConfig::desk_conv(grid, 0.1, 500, seed)
                            },
                            affine_correction: true,
                        },
                    },
                    gaussian: true,
                    perturbation: PerturbationConfig::Pixel {
                        ix: center,
                        iy: center,
                        amplitude: 1.0,
                    },
                    observables: ObservableConfig {
                        components: vec![center * grid + center],
                        orders: vec![1, 3, 5],
                    },
                    response: ResponseConfig {
                        max_lag: 10.0,
                        lag_stride: 1,
                    },
                    truth: None,
                    langevin: None,
                    maxent: None,
                    reduced_data: false,
                    reduced_samples: default_reduced(),
                }
            }
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown preset {other}; expected scalar, triad, barotropic or navier-stokes"
                )))
            }
        };
        config.validate()?;
        Ok(config)
    }
}

/// Reduced convolutional score network for `grid × grid` fields.
pub fn small_conv_dsm(grid: usize, base_channels: usize, down_levels: usize, residual_blocks: usize, sigma_g: f64, epochs: usize, seed: u64) -> DsmConfig {
    DsmConfig {
        network: DsmNetwork::Conv(ConvNetworkSpec {
            grid_size: grid,
            base_channels,
            down_levels,
            residual_blocks,
            seed,
        }),
        ..DsmConfig::desk_conv(grid, sigma_g, epochs, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PRESETS: [&str; 4] = ["scalar", "triad", "barotropic", "navier-stokes"];

    #[test]
    fn presets_validate_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            let p = dir.path().join(format!("{name}.json"));
            c.save(&p).unwrap();
            assert_eq!(ExperimentConfig::load(&p).unwrap(), c, "{name}");
        }
        assert!(ExperimentConfig::preset("lorenz").is_err());
    }

    #[test]
    fn clustering_is_refused_on_grids() {
        let mut c = ExperimentConfig::preset("navier-stokes").unwrap();
        c.score.method = ScoreMethod::Kgmm(KgmmConfig::new(c.model.dim(), 0.1, 100, 1));
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("dsm"), "{err}");
    }

    #[test]
    fn grid_models_have_no_ensemble_truth() {
        let mut c = ExperimentConfig::preset("navier-stokes").unwrap();
        c.truth = ExperimentConfig::preset("triad").unwrap().truth;
        assert!(c.validate().is_err());
    }

    #[test]
    fn reduced_data_caps_training() {
        let mut c = ExperimentConfig::preset("scalar").unwrap();
        assert_eq!(c.training_samples(), 1_000_000);
        c.reduced_data = true;
        assert_eq!(c.training_samples(), 10_000);
        c.validate().unwrap();
    }

    #[test]
    fn seed_reaches_every_generator() {
        let c = ExperimentConfig::preset("triad").unwrap().with_seed(77);
        let ScoreMethod::Kgmm(k) = &c.score.method else { panic!() };
        assert_eq!((c.seed, k.seed, k.network.seed, k.train.seed), (77, 77, 77, 77));
    }

    #[test]
    fn damping_needs_the_triad() {
        let mut c = ExperimentConfig::preset("scalar").unwrap();
        c.perturbation = PerturbationConfig::TriadDamping { delta: -0.4 };
        assert!(c.validate().is_err());
    }
}

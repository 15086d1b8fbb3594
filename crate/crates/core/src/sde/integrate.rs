use serde::{Deserialize, Serialize};

use super::{SdeModel, Trajectory};
use crate::rng::{self, Stream};
use crate::score::Score;
use crate::{Error, Result};

/// Integration settings. `burn_in` is simulated time discarded before the
/// first stored row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub stride: usize,
    pub burn_in: f64,
}

impl EmConfig {
    pub fn new(dt: f64, n_steps: usize) -> Self {
        EmConfig {
            dt,
            n_steps,
            stride: 1,
            burn_in: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if self.stride == 0 {
            return Err(Error::InvalidParameter("stride must be at least 1".into()));
        }
        if !(self.burn_in >= 0.0) {
            return Err(Error::InvalidParameter("burn-in must be non-negative".into()));
        }
        Ok(())
    }

    pub fn burn_in_steps(&self) -> usize {
        (self.burn_in / self.dt).round() as usize
    }
}

/// One Euler–Maruyama step `x ← x + F(x) dt + σ(x) √dt z` with reusable
/// scratch space.
pub struct Stepper<M> {
    pub model: M,
    dt: f64,
    sqrt_dt: f64,
    drift: Vec<f64>,
    noise: Vec<f64>,
}

impl<M: SdeModel> Stepper<M> {
    pub fn new(model: M, dt: f64) -> Self {
        let (n, m) = (model.dim(), model.noise_dim());
        Stepper {
            model,
            dt,
            sqrt_dt: dt.sqrt(),
            drift: vec![0.0; n],
            noise: vec![0.0; m],
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Draws the next standard-normal increment from `rng` and steps.
    pub fn step(&mut self, x: &mut [f64], rng: &mut Stream) {
        rng::fill_normal(rng, &mut self.noise);
        self.advance(x);
    }

    /// Steps with caller-supplied standard normals `z` (common random numbers).
    pub fn step_with(&mut self, x: &mut [f64], z: &[f64]) {
        self.noise.copy_from_slice(z);
        self.advance(x);
    }

    fn advance(&mut self, x: &mut [f64]) {
        self.model.drift(x, &mut self.drift);
        for d in self.drift.iter_mut() {
            *d *= self.dt;
        }
        for w in self.noise.iter_mut() {
            *w *= self.sqrt_dt;
        }
        self.model.add_noise(x, &self.noise, &mut self.drift);
        for (xi, d) in x.iter_mut().zip(&self.drift) {
            *xi += d;
        }
    }
}

fn finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

fn integrate<M: SdeModel>(
    model: M,
    x0: &[f64],
    config: &EmConfig,
    rng: &mut Stream,
    hint: &'static str,
) -> Result<Trajectory> {
    config.validate()?;
    if x0.len() != model.dim() {
        return Err(Error::dim("initial state", model.dim(), x0.len()));
    }
    if !finite(x0) {
        return Err(Error::InvalidParameter("initial state is not finite".into()));
    }
    let dim = model.dim();
    let mut stepper = Stepper::new(model, config.dt);
    let mut x = x0.to_vec();
    let burn = config.burn_in_steps();
    for step in 0..burn {
        stepper.step(&mut x, rng);
        if !finite(&x) {
            return Err(Error::Integration { step, hint });
        }
    }
    let rows = config.n_steps / config.stride;
    let mut states = Vec::with_capacity(rows * dim);
    for k in 0..rows * config.stride {
        stepper.step(&mut x, rng);
        if !finite(&x) {
            return Err(Error::Integration { step: burn + k, hint });
        }
        if (k + 1) % config.stride == 0 {
            states.extend_from_slice(&x);
        }
    }
    Trajectory::new(dim, config.dt, config.stride, states)
}

/// Integrates `model` from `x0`, storing every `stride`-th state after the
/// burn-in. The initial state itself is not stored, so the rows span
/// `rows·stride·dt` of simulated time.
pub fn euler_maruyama<M: SdeModel>(model: M, x0: &[f64], config: &EmConfig, seed: u64) -> Result<Trajectory> {
    let mut rng = rng::stream(seed, rng::domain::TRAJECTORY, 0);
    integrate(model, x0, config, &mut rng, "reduce dt or check the model parameters")
}

struct Langevin<'a, S: ?Sized>(&'a S);

impl<S: Score + ?Sized> SdeModel for Langevin<'_, S> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn name(&self) -> &str {
        "langevin"
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.0.eval(x, out)
    }
    fn noise(&self, _x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            out[i * (n + 1)] = std::f64::consts::SQRT_2;
        }
    }
    fn is_additive(&self) -> bool {
        true
    }
    fn add_noise(&self, _x: &[f64], w: &[f64], out: &mut [f64]) {
        for (o, wi) in out.iter_mut().zip(w) {
            *o += std::f64::consts::SQRT_2 * wi;
        }
    }
}

/// Samples the density whose score is `score` by integrating
/// `ẋ = s(x) + √2 ξ`.
pub fn langevin_sample<S: Score + ?Sized>(score: &S, x0: &[f64], config: &EmConfig, seed: u64) -> Result<Trajectory> {
    let mut rng = rng::stream(seed, rng::domain::LANGEVIN, 0);
    integrate(
        Langevin(score),
        x0,
        config,
        &mut rng,
        "Langevin sampler left the region where the score is reliable; reduce dt",
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n_members: usize,
    pub burn_in: f64,
    pub horizon: f64,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_members == 0 {
            return Err(Error::InvalidParameter("ensemble needs at least one member".into()));
        }
        if !(self.burn_in >= 0.0) || !(self.horizon >= 0.0) {
            return Err(Error::InvalidParameter("burn-in and horizon must be non-negative".into()));
        }
        Ok(())
    }

    /// Initial-state row used by `member` when drawing from `available`
    /// steady-state samples (evenly spread to limit correlation).
    pub fn initial_row(&self, member: usize, available: usize) -> usize {
        member * (available / self.n_members)
    }
}

/// Independent members started from rows of `initial_draws`, each on its own
/// noise stream `(seed, member)`. Row `k` of a member is its state at time
/// `k·stride·dt` after the burn-in, so row 0 is the (burnt-in) initial state.
pub fn ensemble_run<M: SdeModel>(
    model: &M,
    spec: &EnsembleSpec,
    initial_draws: &Trajectory,
    dt: f64,
    stride: usize,
) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    EmConfig {
        dt,
        n_steps: 0,
        stride,
        burn_in: spec.burn_in,
    }
    .validate()?;
    if initial_draws.dim() != model.dim() {
        return Err(Error::dim("ensemble initial states", model.dim(), initial_draws.dim()));
    }
    if initial_draws.len() < spec.n_members {
        return Err(Error::InsufficientData(format!(
            "{} members requested but only {} initial states supplied",
            spec.n_members,
            initial_draws.len()
        )));
    }
    let burn = (spec.burn_in / dt).round() as usize;
    let steps = (spec.horizon / dt).round() as usize;
    let mut stepper = Stepper::new(model, dt);
    (0..spec.n_members)
        .map(|m| {
            let mut rng = rng::stream(spec.seed, rng::domain::ENSEMBLE, m as u64);
            let mut x = initial_draws.row(spec.initial_row(m, initial_draws.len())).to_vec();
            for step in 0..burn {
                stepper.step(&mut x, &mut rng);
                if !finite(&x) {
                    return Err(Error::Integration {
                        step,
                        hint: "ensemble member diverged during burn-in; reduce dt",
                    });
                }
            }
            let mut states = x.clone();
            for k in 0..steps {
                stepper.step(&mut x, &mut rng);
                if !finite(&x) {
                    return Err(Error::Integration {
                        step: burn + k,
                        hint: "ensemble member diverged; reduce dt",
                    });
                }
                if (k + 1) % stride == 0 {
                    states.extend_from_slice(&x);
                }
            }
            Trajectory::new(model.dim(), dt, stride, states)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{OuModel, ScalarModel, ScalarParams};
    use crate::stats;

    struct Linear(f64);
    impl Score for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, x: &[f64], out: &mut [f64]) {
            out[0] = self.0 * x[0];
        }
    }

    #[test]
    fn deterministic_euler_step() {
        let m = OuModel {
            dim: 1,
            rate: 1.0,
            sigma: 0.0,
        };
        let t = euler_maruyama(&m, &[1.0], &EmConfig::new(0.1, 1), 0).unwrap();
        assert_eq!(t.len(), 1);
        assert!((t.row(0)[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn scalar_model_noise_free_step() {
        let p = ScalarParams {
            sigma: 1e-300,
            ..ScalarParams::default()
        };
        let m = ScalarModel::new(p).unwrap();
        let t = euler_maruyama(&m, &[0.0], &EmConfig::new(0.01, 1), 3).unwrap();
        assert!((t.row(0)[0] - 0.006).abs() < 1e-12);
    }

    fn ou_variance(dt: f64, n: usize, seed: u64) -> (f64, f64) {
        let cfg = EmConfig {
            dt,
            n_steps: n,
            stride: 1,
            burn_in: 10.0,
        };
        let t = euler_maruyama(OuModel::standard(1), &[0.0], &cfg, seed).unwrap();
        let xs = t.column(0);
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let tau = stats::decorrelation_lag(&xs, 0.05, 10_000);
        stats::block_mean_se(&sq, stats::block_length(sq.len(), tau, 20))
    }

    #[test]
    fn ou_stationary_variance() {
        // Euler–Maruyama bias on the variance is 1/(1 − dt/2) − 1 ≈ dt/2
        let (v, se) = ou_variance(0.01, 1_000_000, 1);
        assert!((v - 1.0).abs() < 3.0 * se + 0.005, "{v} ± {se}");
    }

    #[test]
    fn halving_dt_changes_variance_within_error() {
        let (a, se_a) = ou_variance(0.01, 1_000_000, 2);
        let (b, se_b) = ou_variance(0.005, 1_000_000, 3);
        assert!((a - b).abs() < 3.0 * (se_a * se_a + se_b * se_b).sqrt(), "{a} vs {b}");
    }

    #[test]
    fn blow_up_names_the_step() {
        let m = OuModel {
            dim: 1,
            rate: -1e3,
            sigma: 0.0,
        };
        let err = euler_maruyama(&m, &[1.0], &EmConfig::new(1.0, 1000), 0).unwrap_err();
        assert!(matches!(err, Error::Integration { step, .. } if step > 0 && step < 1000), "{err}");
    }

    #[test]
    fn reproducible() {
        let cfg = EmConfig::new(0.01, 500);
        let a = euler_maruyama(OuModel::standard(2), &[0.0, 1.0], &cfg, 9).unwrap();
        let b = euler_maruyama(OuModel::standard(2), &[0.0, 1.0], &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn langevin_with_linear_score_is_ou() {
        let cfg = EmConfig {
            dt: 0.01,
            n_steps: 1_000_000,
            stride: 1,
            burn_in: 10.0,
        };
        let t = langevin_sample(&Linear(-1.0), &[0.0], &cfg, 5).unwrap();
        let xs = t.column(0);
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let tau = stats::decorrelation_lag(&xs, 0.05, 10_000);
        let (v, se) = stats::block_mean_se(&sq, stats::block_length(sq.len(), tau, 20));
        assert!((v - 1.0).abs() < 3.0 * se + 0.005, "{v} ± {se}");
    }

    #[test]
    fn langevin_with_zero_score_is_brownian() {
        // Var x(t) = 2t; average over independent seeds
        let cfg = EmConfig::new(0.01, 100);
        let ends: Vec<f64> = (0..4000)
            .map(|s| langevin_sample(&Linear(0.0), &[0.0], &cfg, s).unwrap().row(99)[0])
            .collect();
        let v = stats::mean(&ends.iter().map(|x| x * x).collect::<Vec<_>>());
        // standard error of a chi-square mean: 2·√(2/n)
        assert!((v - 2.0).abs() < 3.0 * 2.0 * (2.0f64 / 4000.0).sqrt(), "{v}");
    }

    #[test]
    fn ensemble_members_use_distinct_streams() {
        let init = Trajectory::new(1, 0.01, 1, vec![0.5, 0.5]).unwrap();
        let spec = EnsembleSpec {
            n_members: 2,
            burn_in: 0.0,
            horizon: 1.0,
            seed: 4,
        };
        let runs = ensemble_run(&OuModel::standard(1), &spec, &init, 0.01, 10).unwrap();
        assert_eq!(runs[0].row(0), runs[1].row(0));
        assert_ne!(runs[0].states(), runs[1].states());
        assert_eq!(runs[0].len(), 11);
    }

    #[test]
    fn zero_horizon_returns_initial_states() {
        let init = Trajectory::new(1, 0.01, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let spec = EnsembleSpec {
            n_members: 3,
            burn_in: 0.0,
            horizon: 0.0,
            seed: 0,
        };
        let runs = ensemble_run(&OuModel::standard(1), &spec, &init, 0.01, 1).unwrap();
        let firsts: Vec<f64> = runs.iter().map(|r| r.row(0)[0]).collect();
        assert_eq!(firsts, vec![0.1, 0.2, 0.3]);
        assert!(runs.iter().all(|r| r.len() == 1));
    }

    #[test]
    fn too_few_initial_states() {
        let init = Trajectory::new(1, 0.01, 1, vec![0.1]).unwrap();
        let spec = EnsembleSpec {
            n_members: 3,
            burn_in: 0.0,
            horizon: 1.0,
            seed: 0,
        };
        assert!(matches!(
            ensemble_run(&OuModel::standard(1), &spec, &init, 0.01, 1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn ou_ensemble_mean_decays() {
        let n = 2000;
        let init = Trajectory::new(1, 0.01, 1, vec![2.0; n]).unwrap();
        let spec = EnsembleSpec {
            n_members: n,
            burn_in: 0.0,
            horizon: 1.0,
            seed: 8,
        };
        let runs = ensemble_run(&OuModel::standard(1), &spec, &init, 0.001, 100).unwrap();
        for k in [2, 5, 10] {
            let t = k as f64 * 0.1;
            let xs: Vec<f64> = runs.iter().map(|r| r.row(k)[0]).collect();
            let se = stats::std_dev(&xs) / (n as f64).sqrt();
            let exact = 2.0 * (-t).exp();
            assert!((stats::mean(&xs) - exact).abs() < 3.0 * se, "t = {t}");
        }
    }
}

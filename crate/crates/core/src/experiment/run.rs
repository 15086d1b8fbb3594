use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LangevinConfig, MaxentStageConfig, ModelConfig, ScoreMethod};
use super::manifest::{RunManifest, StageRecord};
use super::{compare_series, SeriesMetrics};
use crate::gfdt::{
    conjugate, ensemble_truth, moment_deltas, read_series_csv, response_series, MomentObservable, Perturbation,
    Profile, ResponseSeries,
};
use crate::maxent::{self, quadrature, MaxentConfig, MomentSet};
use crate::nn::{load_params, save_params, Mlp, TrainMetadata, TrainReport, UNet};
use crate::score::dsm::{self, Constant, Coordinate, DsmNetwork, IdentityResidual, TestFunction};
use crate::score::kgmm;
use crate::score::{AffineCorrection, AnalyticScore, GaussianScore, NeuralScore, Score, ScoreModel, ScoreNet};
use crate::sde::{
    euler_maruyama, langevin_sample, BarotropicModel, EmConfig, EnsembleSpec, Normalization, ScalarModel, SdeModel,
    Trajectory, TriadModel,
};
use crate::spectral::{self, NsRunConfig};
use crate::stats;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    FitScore,
    Respond,
    Truth,
    Maxent,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::FitScore,
        Stage::Respond,
        Stage::Truth,
        Stage::Maxent,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::FitScore => "fit-score",
            Stage::Respond => "respond",
            Stage::Truth => "truth",
            Stage::Maxent => "maxent",
            Stage::Report => "report",
        }
    }
}

/// Score of the normalized state `x̃ = S⁻¹(x − μ)`: `s̃(x̃) = S s(μ + S x̃)`.
pub struct NormalizedScore<'a, S: ?Sized> {
    pub inner: &'a S,
    pub norm: &'a Normalization,
}

impl<S: Score + ?Sized> Score for NormalizedScore<'_, S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let mut y = x.to_vec();
        self.norm.invert(&mut y);
        self.inner.eval(&y, out);
        for (o, s) in out.iter_mut().zip(&self.norm.std) {
            *o *= s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfRecord {
    pub component: usize,
    pub bins: usize,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxentRecord {
    pub epsilon: f64,
    pub n_moments: usize,
    /// `converged`, `non-convergence` or `rejected`.
    pub status: String,
    pub residual: Option<f64>,
    /// L1 distance to the exact perturbed density where one is known.
    pub l1_exact: Option<f64>,
    pub message: Option<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub observable: String,
    pub method: String,
    pub reference: String,
    pub metrics: SeriesMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredNeural {
    network: DsmNetwork,
    params: String,
    normalization: Normalization,
    correction: Option<AffineCorrection>,
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidParameter(format!(
                "{} is in use by another run (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// One experiment bound to its output directory. Stages can run one at a
/// time; each picks up the artifacts of earlier stages from memory or disk.
pub struct Experiment {
    config: ExperimentConfig,
    dir: PathBuf,
    manifest: RunManifest,
    _lock: DirLock,
    traj: Option<Trajectory>,
    norm: Option<Normalization>,
    neural: Option<ScoreModel>,
    gaussian: Option<ScoreModel>,
    responses: Vec<ResponseSeries>,
    pdfs: Vec<PdfRecord>,
    identity: Vec<IdentityResidual>,
    maxent: Vec<MaxentRecord>,
    comparisons: Vec<ComparisonRecord>,
}

const MANIFEST: &str = "manifest.json";

impl Experiment {
    /// Opens (creating if needed) `dir` for `config`. A manifest left by a
    /// run of the same config is continued; otherwise a fresh one starts.
    pub fn open(config: ExperimentConfig, dir: &Path) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(dir)?;
        let lock = DirLock::acquire(dir)?;
        let manifest = match RunManifest::read(&dir.join(MANIFEST)) {
            Ok(m) if m.config == config => m,
            _ => RunManifest::new(config.clone()),
        };
        let exp = Experiment {
            config,
            dir: dir.to_path_buf(),
            manifest,
            _lock: lock,
            traj: None,
            norm: None,
            neural: None,
            gaussian: None,
            responses: Vec::new(),
            pdfs: Vec::new(),
            identity: Vec::new(),
            maxent: Vec::new(),
            comparisons: Vec::new(),
        };
        exp.config.save(&exp.dir.join("config.json"))?;
        exp.manifest.write(&exp.dir.join(MANIFEST))?;
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn responses(&self) -> &[ResponseSeries] {
        &self.responses
    }

    /// The series of `observable` (e.g. `x1_m2`) produced by `method`.
    pub fn response(&self, observable: &str, method: &str) -> Option<&ResponseSeries> {
        self.responses
            .iter()
            .find(|s| s.observable == observable && s.method == method)
    }

    pub fn pdf_records(&self) -> &[PdfRecord] {
        &self.pdfs
    }

    pub fn identity_residuals(&self) -> &[IdentityResidual] {
        &self.identity
    }

    pub fn maxent_records(&self) -> &[MaxentRecord] {
        &self.maxent
    }

    pub fn comparisons(&self) -> &[ComparisonRecord] {
        &self.comparisons
    }

    /// Physical-unit unperturbed trajectory.
    pub fn trajectory(&mut self) -> Result<&Trajectory> {
        self.ensure_data()?;
        Ok(self.traj.as_ref().unwrap())
    }

    pub fn normalization(&mut self) -> Result<&Normalization> {
        self.ensure_data()?;
        Ok(self.norm.as_ref().unwrap())
    }

    /// The estimated score (neural when one was trained, otherwise Gaussian).
    pub fn score(&mut self) -> Result<&ScoreModel> {
        self.ensure_scores()?;
        Ok(self.neural.as_ref().or(self.gaussian.as_ref()).unwrap())
    }

    /// Runs `stage`, recording its status and timing in the manifest. Errors
    /// carry the stage name.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let name = stage.name();
        info!("stage {name}");
        let start = Instant::now();
        self.manifest.stages.insert(
            name.into(),
            StageRecord {
                status: "running".into(),
                seconds: 0.0,
                error: None,
                warnings: Vec::new(),
            },
        );
        self.manifest.write(&self.dir.join(MANIFEST))?;
        let result = match stage {
            Stage::Simulate => self.simulate(),
            Stage::FitScore => self.fit_score(),
            Stage::Respond => self.respond(),
            Stage::Truth => self.truth(),
            Stage::Maxent => self.run_maxent(),
            Stage::Report => self.report(),
        };
        let record = self.manifest.stages.get_mut(name).unwrap();
        record.seconds = start.elapsed().as_secs_f64();
        match &result {
            Ok(()) => record.status = "ok".into(),
            Err(e) => {
                record.status = "failed".into();
                record.error = Some(e.to_string());
            }
        }
        self.manifest.write(&self.dir.join(MANIFEST))?;
        result.map_err(|e| Error::Stage {
            stage: name,
            cause: Box::new(e),
        })
    }

    /// Every stage that applies to the config, in order.
    pub fn run_all(&mut self) -> Result<()> {
        for stage in Stage::ALL {
            let skip = match stage {
                Stage::Truth => self.config.truth.is_none(),
                Stage::Maxent => self.config.maxent.is_none(),
                _ => false,
            };
            if !skip {
                self.run_stage(stage)?;
            }
        }
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn record(&mut self, rel: &str, stage: Stage) -> Result<()> {
        self.manifest.add_artifact(&self.dir, rel, stage.name())
    }

    fn warn_stage(&mut self, stage: Stage, msg: String) {
        warn!("{msg}");
        if let Some(r) = self.manifest.stages.get_mut(stage.name()) {
            r.warnings.push(msg);
        }
    }

    // ---- simulate ----

    fn simulate(&mut self) -> Result<()> {
        let sim = self.config.simulation.clone();
        let seed = self.config.seed;
        fs::create_dir_all(self.path("data"))?;
        let model_cfg = self.config.model.clone();
        let traj = match &model_cfg {
            ModelConfig::NavierStokes { params, init_amplitude } => {
                let run_cfg = NsRunConfig {
                    dt: sim.dt,
                    burn_in_steps: (sim.burn_in / sim.dt).round() as usize,
                    n_snapshots: sim.rows,
                    snapshot_stride: sim.stride,
                    seed,
                    init_amplitude: *init_amplitude,
                };
                let run = spectral::run_to_stationarity(params, &run_cfg)?;
                spectral::write_snapshots(&self.path("data"), params, &run_cfg, &run)?;
                let (drift, se) = spectral::half_difference(&run.enstrophy);
                self.manifest.derive("enstrophy_half_difference", [drift, se]);
                if drift.abs() > 3.0 * se {
                    self.warn_stage(
                        Stage::Simulate,
                        format!("enstrophy drifts between halves by {drift:.3e} ± {se:.3e}; extend the burn-in"),
                    );
                }
                let solver = spectral::NsSolver::new(params.clone())?;
                self.manifest.derive("forced_modes", solver.forced_modes());
                self.manifest.derive("forcing", &params.forcing);
                self.record("data/snapshots.bin", Stage::Simulate)?;
                self.record("data/snapshots.json", Stage::Simulate)?;
                run.snapshots
            }
            model => {
                let sde = sde_model(model)?;
                let x0 = initial_state(model);
                let em = EmConfig {
                    dt: sim.dt,
                    n_steps: sim.rows * sim.stride,
                    stride: sim.stride,
                    burn_in: sim.burn_in,
                };
                self.manifest.derive("initial_state", &x0);
                let traj = euler_maruyama(&*sde, &x0, &em, seed)?;
                traj.write_binary(&self.path("data/trajectory.bin"))?;
                self.record("data/trajectory.bin", Stage::Simulate)?;
                traj
            }
        };
        self.manifest.derive("dt", sim.dt);
        self.manifest.derive("burn_in", sim.burn_in);
        self.manifest.derive("stride", sim.stride);
        self.manifest.derive("sample_interval", sim.sample_interval());
        let (_, norm) = traj.normalize()?;
        self.write_json("data/normalization.json", &norm, Stage::Simulate)?;
        self.traj = Some(traj);
        self.norm = Some(norm);
        Ok(())
    }

    fn ensure_data(&mut self) -> Result<()> {
        if self.traj.is_some() {
            return Ok(());
        }
        let traj = if self.config.model.is_grid() {
            let data = self.path("data");
            if !data.join("snapshots.bin").exists() {
                return Err(missing("data/snapshots.bin", Stage::Simulate));
            }
            spectral::read_snapshots(&data)?.1
        } else {
            let p = self.path("data/trajectory.bin");
            if !p.exists() {
                return Err(missing("data/trajectory.bin", Stage::Simulate));
            }
            Trajectory::read_binary(&p)?
        };
        let norm: Normalization = read_json(&self.path("data/normalization.json"))?;
        if traj.dim() != self.config.model.dim() {
            return Err(Error::dim("stored trajectory", self.config.model.dim(), traj.dim()));
        }
        self.traj = Some(traj);
        self.norm = Some(norm);
        Ok(())
    }

    // ---- fit-score ----

    fn training_rows(&self) -> Vec<usize> {
        let total = self.traj.as_ref().map_or(0, |t| t.len());
        let n = self.config.training_samples().min(total);
        (0..n).map(|k| k * total / n).collect()
    }

    fn fit_score(&mut self) -> Result<()> {
        self.ensure_data()?;
        fs::create_dir_all(self.path("score"))?;
        let traj = self.traj.as_ref().unwrap();
        let norm = self.norm.clone().unwrap();
        let dim = traj.dim();
        let rows = self.training_rows();
        let every = (traj.len() / rows.len().max(1)).max(1);
        self.manifest.derive("training_samples", rows.len());
        self.manifest.derive("training_row_spacing", every);
        let mut physical = Vec::with_capacity(rows.len() * dim);
        for &r in &rows {
            physical.extend_from_slice(traj.row(r));
        }
        let mut normalized = physical.clone();
        for x in normalized.chunks_exact_mut(dim) {
            norm.apply(x);
        }

        let gaussian_only = matches!(self.config.score.method, ScoreMethod::Gaussian);
        let gaussian = match GaussianScore::fit(&physical, dim) {
            Ok(g) => {
                self.write_json("score/gaussian.json", &g, Stage::FitScore)?;
                Some(ScoreModel::Gaussian(g))
            }
            // fields with an exact linear constraint (zero-mean vorticity) have
            // no Gaussian density; the baseline is skipped
            Err(e @ Error::SingularCovariance { .. }) if !gaussian_only => {
                self.warn_stage(Stage::FitScore, format!("no Gaussian baseline: {e}"));
                None
            }
            Err(e) => return Err(e),
        };
        let neural = match self.config.score.method.clone() {
            ScoreMethod::Gaussian => None,
            ScoreMethod::Kgmm(cfg) => {
                let fit = kgmm::kgmm(&normalized, dim, &cfg, norm.clone())?;
                fit.table.write_csv(&self.path("score/centroids.csv"))?;
                self.record("score/centroids.csv", Stage::FitScore)?;
                self.manifest.derive("kgmm_resplits", fit.resplits);
                self.manifest.derive("kgmm_refine_converged", fit.refine_converged);
                self.manifest
                    .derive("kgmm_low_confidence", fit.table.low_confidence.iter().filter(|&&b| b).count());
                self.store_neural(&fit.model, &fit.report)?;
                Some(fit.model)
            }
            ScoreMethod::Dsm { dsm, affine_correction } => {
                let (model, report) = dsm::train_dsm(&normalized, dim, &dsm, norm.clone())?;
                let model = if affine_correction {
                    let scores = dsm::evaluate_scores(&model, &physical);
                    let corr = dsm::fit_affine_correction(&physical, &scores, dim)?;
                    ScoreModel::Corrected(Box::new(model), corr)
                } else {
                    model
                };
                self.store_neural(&model, &report)?;
                Some(model)
            }
        };
        self.gaussian = gaussian;
        self.neural = neural;
        self.check_identities()?;
        if let Some(l) = self.config.langevin.clone() {
            self.langevin(&l)?;
        }
        Ok(())
    }

    fn store_neural(&mut self, model: &ScoreModel, report: &TrainReport) -> Result<()> {
        let (inner, correction) = match model {
            ScoreModel::Corrected(inner, c) => (&**inner, Some(c.clone())),
            m => (m, None),
        };
        let ScoreModel::Neural(ns) = inner else {
            return Err(Error::InvalidParameter("only network scores are stored as parameters".into()));
        };
        let network = match &ns.net {
            ScoreNet::Dense(m) => DsmNetwork::Dense(m.spec().clone()),
            ScoreNet::Conv(u) => DsmNetwork::Conv(u.spec().clone()),
        };
        let spec_json = serde_json::to_string(&network)?;
        let seed = match &network {
            DsmNetwork::Dense(s) => s.seed,
            DsmNetwork::Conv(s) => s.seed,
        };
        let meta = TrainMetadata {
            train: None,
            final_loss: Some(report.final_loss),
            loss_history: report.loss_history.clone(),
            notes: vec![format!("score method {}", self.config.score.method.name())],
        };
        save_params(&self.path("score/params.bin"), &spec_json, seed, &ns.params, &meta)?;
        self.record("score/params.bin", Stage::FitScore)?;
        self.record("score/params.bin.json", Stage::FitScore)?;
        let stored = StoredNeural {
            network,
            params: "params.bin".into(),
            normalization: ns.normalization.clone(),
            correction,
        };
        self.write_json("score/score.json", &stored, Stage::FitScore)
    }

    fn ensure_scores(&mut self) -> Result<()> {
        if self.gaussian.is_some() || self.neural.is_some() {
            return Ok(());
        }
        let gaussian_only = matches!(self.config.score.method, ScoreMethod::Gaussian);
        let gpath = self.path("score/gaussian.json");
        if gpath.exists() {
            let g: GaussianScore = read_json(&gpath)?;
            self.gaussian = Some(ScoreModel::Gaussian(g));
        } else if gaussian_only {
            return Err(missing("score/gaussian.json", Stage::FitScore));
        }
        if !gaussian_only {
            if !self.path("score/score.json").exists() {
                return Err(missing("score/score.json", Stage::FitScore));
            }
            let stored: StoredNeural = read_json(&self.path("score/score.json"))?;
            let (_, _, params) = load_params(&self.path("score").join(&stored.params))?;
            let net = match stored.network {
                DsmNetwork::Dense(s) => ScoreNet::Dense(Mlp::try_new(s)?),
                DsmNetwork::Conv(s) => ScoreNet::Conv(UNet::new(s)?),
            };
            let model = ScoreModel::Neural(NeuralScore::new(net, params, stored.normalization)?);
            self.neural = Some(match stored.correction {
                Some(c) => ScoreModel::Corrected(Box::new(model), c),
                None => model,
            });
        }
        Ok(())
    }

    /// Integration-by-parts residuals `⟨g s_k⟩ + ⟨∂_k g⟩` for `g ∈ {1, x_c}`
    /// on rows left out of training (in-sample when every row was used).
    fn check_identities(&mut self) -> Result<()> {
        let score = self.neural.as_ref().or(self.gaussian.as_ref()).unwrap();
        let traj = self.traj.as_ref().unwrap();
        let norm = self.norm.as_ref().unwrap();
        let dim = traj.dim();
        let rows = self.training_rows();
        let every = (traj.len() / rows.len().max(1)).max(1);
        let held_out: Vec<usize> = if every >= 2 {
            rows.iter().map(|r| r + every / 2).filter(|&r| r < traj.len()).collect()
        } else {
            rows.clone()
        };
        let mut samples = Vec::with_capacity(held_out.len() * dim);
        for &r in &held_out {
            samples.extend_from_slice(traj.row(r));
        }
        for x in samples.chunks_exact_mut(dim) {
            norm.apply(x);
        }
        let ns = NormalizedScore { inner: score, norm };
        let scores = dsm::evaluate_scores(&ns, &samples);
        let components = self.config.components();
        let first: Vec<f64> = samples.iter().skip(components[0]).step_by(dim).copied().collect();
        let tau = stats::decorrelation_lag(&first, (-1.0f64).exp(), (first.len() / 20).max(1));
        let block = stats::block_length(first.len(), tau, 20);
        let coords: Vec<Coordinate> = components.iter().map(|&c| Coordinate(c)).collect();
        let mut tests: Vec<&dyn TestFunction> = vec![&Constant];
        tests.extend(coords.iter().map(|c| c as &dyn TestFunction));
        self.identity = dsm::identity_residuals(&samples, &scores, dim, &tests, &components, block);
        self.manifest
            .derive("identity_check_rows", if every >= 2 { "held-out" } else { "in-sample" });
        self.manifest.derive("identity_block_length", block);
        dsm::write_residuals_csv(&self.path("score/identity_residuals.csv"), &self.identity)?;
        self.record("score/identity_residuals.csv", Stage::FitScore)
    }

    fn langevin(&mut self, cfg: &LangevinConfig) -> Result<()> {
        let score = self.neural.as_ref().or(self.gaussian.as_ref()).unwrap();
        let traj = self.traj.as_ref().unwrap();
        let norm = self.norm.as_ref().unwrap();
        let ns = NormalizedScore { inner: score, norm };
        let mut x0 = traj.row(0).to_vec();
        norm.apply(&mut x0);
        let em = EmConfig {
            dt: cfg.dt,
            n_steps: cfg.steps,
            stride: cfg.stride,
            burn_in: cfg.burn_in,
        };
        let samples = langevin_sample(&ns, &x0, &em, self.config.seed)?;
        let data = traj.normalized_with(norm);
        fs::create_dir_all(self.path("pdf"))?;
        let mut records = Vec::new();
        for c in self.config.components() {
            let a = data.column(c);
            let b = samples.column(c);
            let bins = cfg.bins.unwrap_or_else(|| {
                stats::freedman_diaconis_bins(if a.len() <= b.len() { &a } else { &b })
            });
            let l1 = super::histogram_compare(&a, &b, Some(bins));
            let rel = format!("pdf/x{}.csv", c + 1);
            write_pdf_csv(&self.path(&rel), &a, &b, bins, norm.mean[c], norm.std[c])?;
            self.manifest.add_artifact(&self.dir, &rel, Stage::FitScore.name())?;
            records.push(PdfRecord { component: c, bins, l1 });
        }
        let mut w = BufWriter::new(File::create(self.path("pdf/metrics.csv"))?);
        writeln!(w, "component,bins,l1")?;
        for r in &records {
            writeln!(w, "x{},{},{}", r.component + 1, r.bins, r.l1)?;
        }
        w.flush()?;
        drop(w);
        self.record("pdf/metrics.csv", Stage::FitScore)?;
        self.pdfs = records;
        Ok(())
    }

    // ---- respond ----

    fn observables(&self) -> Vec<MomentObservable> {
        let mut v = Vec::new();
        for c in self.config.components() {
            for &n in &self.config.observables.orders {
                v.push(MomentObservable::central(c, n, 0.0));
            }
        }
        v
    }

    fn perturbation(&self) -> Result<Perturbation> {
        self.config
            .perturbation
            .resolve(&self.config.model, self.norm.as_ref().unwrap())
    }

    fn respond(&mut self) -> Result<()> {
        self.ensure_data()?;
        self.ensure_scores()?;
        let pert = self.perturbation()?;
        self.manifest.derive("perturbation_physical", &pert);
        let traj = self.traj.as_ref().unwrap();
        let nt = traj.normalized_with(self.norm.as_ref().unwrap());
        let obs = self.observables();
        let mut methods: Vec<(&str, &dyn Score)> = Vec::new();
        if let Some(s) = &self.neural {
            methods.push(("gfdt-neural", s));
        }
        if let Some(g) = self.gaussian.as_ref().filter(|_| self.config.gaussian || self.neural.is_none()) {
            methods.push(("gfdt-gaussian", g));
        }
        let analytic = self.analytic_score();
        if let Some(a) = &analytic {
            methods.push(("gfdt-analytic", a));
        }
        let mut out = Vec::new();
        for (name, score) in methods {
            let b = conjugate(score, &pert)?.series(traj.states());
            out.extend(response_series(
                &nt,
                &obs,
                &b,
                self.config.response.max_lag,
                self.config.response.lag_stride,
                name,
            )?);
        }
        self.store_series(&out, Stage::Respond)?;
        self.responses.retain(|s| s.method == "ensemble-truth");
        self.responses.extend(out);
        Ok(())
    }

    fn analytic_score(&self) -> Option<AnalyticScore> {
        match &self.config.model {
            ModelConfig::Scalar { params } => {
                let m = ScalarModel { params: *params };
                Some(AnalyticScore::new(1, move |x, o| o[0] = m.score(x[0])))
            }
            _ => None,
        }
    }

    fn store_series(&mut self, series: &[ResponseSeries], stage: Stage) -> Result<()> {
        fs::create_dir_all(self.path("responses"))?;
        for s in series {
            let rel = format!("responses/{}_{}.csv", s.observable, s.method);
            s.write_csv(&self.path(&rel))?;
            self.record(&rel, stage)?;
        }
        Ok(())
    }

    fn ensure_responses(&mut self) -> Result<()> {
        if !self.responses.is_empty() {
            return Ok(());
        }
        let files: Vec<String> = self
            .manifest
            .artifacts
            .iter()
            .filter(|a| a.path.starts_with("responses/"))
            .map(|a| a.path.clone())
            .collect();
        if files.is_empty() {
            return Err(missing("responses/", Stage::Respond));
        }
        for f in files {
            self.responses.extend(read_series_csv(&self.path(&f))?);
        }
        Ok(())
    }

    // ---- truth ----

    fn truth(&mut self) -> Result<()> {
        let Some(tc) = self.config.truth.clone() else {
            return Err(Error::InvalidParameter("no truth settings in the config".into()));
        };
        self.ensure_data()?;
        let pert = self.perturbation()?;
        let sim = &self.config.simulation;
        let spec = EnsembleSpec {
            n_members: tc.members,
            burn_in: tc.burn_in,
            horizon: self.config.response.max_lag,
            seed: self.config.seed,
        };
        let sde = sde_model(&self.config.model)?;
        let obs = self.observables();
        let series = ensemble_truth(
            &&*sde,
            &pert,
            tc.epsilon,
            tc.protocol,
            &spec,
            self.traj.as_ref().unwrap(),
            sim.dt,
            sim.stride * self.config.response.lag_stride,
            &obs,
            self.norm.as_ref().unwrap(),
        )?;
        self.store_series(&series, Stage::Truth)?;
        self.responses.retain(|s| s.method != "ensemble-truth");
        self.responses.extend(series);
        Ok(())
    }

    // ---- maxent ----

    fn run_maxent(&mut self) -> Result<()> {
        let Some(mc) = self.config.maxent.clone() else {
            return Err(Error::InvalidParameter("no maxent settings in the config".into()));
        };
        self.ensure_data()?;
        self.ensure_responses()?;
        let norm = self.norm.clone().unwrap();
        let c = mc.component;
        let series: Vec<ResponseSeries> = (1..=mc.n_moments as u32)
            .map(|n| {
                let id = MomentObservable::central(c, n, 0.0).id();
                self.response(&id, &mc.source)
                    .cloned()
                    .ok_or_else(|| Error::InvalidParameter(format!("no {} series from {}", id, mc.source)))
            })
            .collect::<Result<_>>()?;
        let x = self.traj.as_ref().unwrap().normalized_with(&norm).column(c);
        let central: Vec<f64> = (0..=mc.n_moments)
            .map(|n| x.iter().map(|v| v.powi(n as i32)).sum::<f64>() / x.len() as f64)
            .collect();
        let (xmin, xmax) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let domain = (xmin.min(-5.0) - 2.0, xmax.max(5.0) + 2.0);
        self.manifest.derive("maxent_domain_normalized", domain);
        fs::create_dir_all(self.path("maxent"))?;
        let solver = MaxentConfig {
            starts: mc.starts,
            ..MaxentConfig::default()
        };
        let mut records = Vec::new();
        for &eps in &mc.epsilons {
            records.push(self.maxent_one(&mc, &series, &central, domain, &solver, eps, &norm)?);
        }
        let mut w = BufWriter::new(File::create(self.path("maxent/summary.csv"))?);
        writeln!(w, "epsilon,n_moments,status,residual,l1_exact")?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &records {
            writeln!(w, "{},{},{},{},{}", r.epsilon, r.n_moments, r.status, opt(r.residual), opt(r.l1_exact))?;
        }
        w.flush()?;
        drop(w);
        self.record("maxent/summary.csv", Stage::Maxent)?;
        self.maxent = records;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn maxent_one(
        &mut self,
        mc: &MaxentStageConfig,
        series: &[ResponseSeries],
        central: &[f64],
        domain: (f64, f64),
        solver: &MaxentConfig,
        eps: f64,
        norm: &Normalization,
    ) -> Result<MaxentRecord> {
        let c = mc.component;
        let deltas = moment_deltas(series, &Profile::Constant(eps), mc.horizon)?;
        let target = deltas.perturbed_central(central)?;
        let exact = self.exact_perturbed_log_density(eps, c, norm);
        let mut rec = MaxentRecord {
            epsilon: eps,
            n_moments: mc.n_moments,
            status: "converged".into(),
            residual: None,
            l1_exact: None,
            message: None,
            warnings: deltas.warnings.clone(),
        };
        match MomentSet::new(target, domain).and_then(|set| maxent::solve_maxent(&set, solver)) {
            Ok(sol) => {
                rec.residual = Some(sol.residual);
                let tag = format!("maxent/eps_{eps}");
                sol.write_json(&self.path(&format!("{tag}.json")))?;
                self.record(&format!("{tag}.json"), Stage::Maxent)?;
                let (mu, sd) = (norm.mean[c], norm.std[c]);
                let mut w = BufWriter::new(File::create(self.path(&format!("{tag}_density.csv")))?);
                writeln!(w, "x,x_normalized,density,exact")?;
                let exact_z = exact
                    .as_ref()
                    .map(|f| quadrature::integrate(|y, o| o[0] = f(y).exp(), domain.0, domain.1, 1, 1e-12)[0]);
                for y in maxent::grid(domain, mc.density_points) {
                    let e = match (&exact, exact_z) {
                        (Some(f), Some(z)) => (f(y).exp() / z / sd).to_string(),
                        _ => String::new(),
                    };
                    writeln!(w, "{},{},{},{}", mu + sd * y, y, sol.density(y) / sd, e)?;
                }
                w.flush()?;
                drop(w);
                self.record(&format!("{tag}_density.csv"), Stage::Maxent)?;
                if let (Some(f), Some(z)) = (&exact, exact_z) {
                    let l1 = quadrature::integrate(
                        |y, o| o[0] = (sol.density(y) - f(y).exp() / z).abs(),
                        domain.0,
                        domain.1,
                        1,
                        1e-10,
                    )[0];
                    rec.l1_exact = Some(l1);
                }
            }
            Err(Error::MaxentNonConvergence { residual }) => {
                rec.status = "non-convergence".into();
                rec.residual = Some(residual);
                self.warn_stage(Stage::Maxent, format!("maxent at epsilon {eps} did not converge"));
            }
            Err(Error::InvalidMoments(m)) => {
                rec.status = "rejected".into();
                rec.message = Some(m.clone());
                self.warn_stage(Stage::Maxent, format!("maxent at epsilon {eps}: moment set rejected ({m})"));
            }
            Err(e) => return Err(e),
        }
        Ok(rec)
    }

    /// Unnormalized log density of the perturbed steady state in normalized
    /// coordinates, when it is known in closed form (scalar model forced
    /// along its state).
    fn exact_perturbed_log_density(&self, eps: f64, c: usize, norm: &Normalization) -> Option<impl Fn(f64) -> f64> {
        let ModelConfig::Scalar { params } = &self.config.model else {
            return None;
        };
        let pert = self.perturbation().ok()?;
        if !pert.is_constant() {
            return None;
        }
        let model = ScalarModel {
            params: params.with_extra_forcing(eps * pert.offset[0]),
        };
        let (mu, sd) = (norm.mean[c], norm.std[c]);
        Some(move |y: f64| model.log_density(mu + sd * y))
    }

    // ---- report ----

    fn report(&mut self) -> Result<()> {
        self.ensure_responses()?;
        let reference = if self.responses.iter().any(|s| s.method == "ensemble-truth") {
            Some("ensemble-truth")
        } else if self.responses.iter().any(|s| s.method == "gfdt-analytic") {
            Some("gfdt-analytic")
        } else {
            None
        };
        let mut out = Vec::new();
        if let Some(rm) = reference {
            for r in self.responses.iter().filter(|s| s.method == rm) {
                for s in self
                    .responses
                    .iter()
                    .filter(|s| s.observable == r.observable && s.method != rm)
                {
                    out.push(ComparisonRecord {
                        observable: r.observable.clone(),
                        method: s.method.clone(),
                        reference: rm.to_string(),
                        metrics: compare_series(r, s)?,
                    });
                }
            }
        }
        fs::create_dir_all(self.path("report"))?;
        let mut w = BufWriter::new(File::create(self.path("report/metrics.csv"))?);
        writeln!(w, "observable,method,reference,rmse,normalized_rmse,max_abs_deviation,sign_agreement,within_3se")?;
        for r in &out {
            let m = &r.metrics;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.observable, r.method, r.reference, m.rmse, m.normalized_rmse, m.max_abs_deviation, m.sign_agreement, m.within_3se
            )?;
        }
        w.flush()?;
        drop(w);
        self.record("report/metrics.csv", Stage::Report)?;
        #[derive(Serialize)]
        struct Summary<'a> {
            comparisons: &'a [ComparisonRecord],
            pdf: &'a [PdfRecord],
            identity: &'a [IdentityResidual],
            maxent: &'a [MaxentRecord],
        }
        let summary = Summary {
            comparisons: &out,
            pdf: &self.pdfs,
            identity: &self.identity,
            maxent: &self.maxent,
        };
        let text = serde_json::to_string_pretty(&summary)?;
        fs::write(self.path("report/summary.json"), text)?;
        self.record("report/summary.json", Stage::Report)?;
        self.comparisons = out;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T, stage: Stage) -> Result<()> {
        fs::write(self.path(rel), serde_json::to_string_pretty(value)?)?;
        self.record(rel, stage)
    }
}

/// Runs every applicable stage of `config` into `dir`.
pub fn run_experiment(config: ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    let mut exp = Experiment::open(config, dir)?;
    exp.run_all()?;
    Ok(exp.manifest.clone())
}

fn missing(what: &str, stage: Stage) -> Error {
    Error::InvalidParameter(format!("{what} not found; run the {} stage first", stage.name()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

fn sde_model(model: &ModelConfig) -> Result<Box<dyn SdeModel>> {
    Ok(match model {
        ModelConfig::Scalar { params } => Box::new(ScalarModel::new(*params)?),
        ModelConfig::Triad { params } => Box::new(TriadModel::new(*params)?),
        ModelConfig::Barotropic { params } => Box::new(BarotropicModel::new(*params)?),
        ModelConfig::NavierStokes { .. } => {
            return Err(Error::InvalidParameter("the vorticity model is not an SDE".into()))
        }
    })
}

fn initial_state(model: &ModelConfig) -> Vec<f64> {
    match model {
        ModelConfig::Barotropic { params } => vec![params.x1_star, 0.0, 0.0, params.x4_star, 0.0, 0.0],
        m => vec![0.0; m.dim()],
    }
}

/// Bin centers (physical units) with both densities binned over the data
/// range.
fn write_pdf_csv(path: &Path, data: &[f64], model: &[f64], bins: usize, mean: f64, std: f64) -> Result<()> {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let pa = stats::histogram(data, lo, hi, bins);
    let pb = stats::histogram(model, lo, hi, bins);
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,x_normalized,data,langevin")?;
    for k in 0..bins {
        let c = lo + (k as f64 + 0.5) * width;
        writeln!(w, "{},{},{},{}", mean + std * c, c, pa[k] / (width * std), pb[k] / (width * std))?;
    }
    w.flush()?;
    Ok(())
}

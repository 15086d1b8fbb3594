//! Denoising score matching and the integration-by-parts identity check.
//!
//! A network `s_θ` is regressed onto `−z/σ_G` at noised inputs `μ + σ_G z`,
//! minimizing `E[σ_G² ‖s_θ(μ + σ_G z) + z/σ_G‖²]`. The minimizer is the
//! score of the data density smoothed by `N(0, σ_G² I)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AffineCorrection, NeuralScore, Score, ScoreModel, ScoreNet};
use crate::nn::{train, ConvNetworkSpec, DenseNetworkSpec, Mlp, Network, RegressionData, TrainConfig, TrainReport, UNet};
use crate::rng;
use crate::sde::Normalization;
use crate::stats;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsmNetwork {
    Dense(DenseNetworkSpec),
    Conv(ConvNetworkSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmConfig {
    pub sigma_g: f64,
    pub network: DsmNetwork,
    pub train: TrainConfig,
}

impl DsmConfig {
    /// Reduced periodic encoder–decoder for `grid × grid` fields: 8 base
    /// channels, three down levels, two residual blocks.
    pub fn desk_conv(grid: usize, sigma_g: f64, epochs: usize, seed: u64) -> Self {
        DsmConfig {
            sigma_g,
            network: DsmNetwork::Conv(ConvNetworkSpec {
                grid_size: grid,
                base_channels: 8,
                down_levels: 3,
                residual_blocks: 2,
                seed,
            }),
            train: TrainConfig {
                final_learning_rate: Some(1e-5),
                ..TrainConfig::new(64, epochs, 1e-3, seed)
            },
        }
    }

    pub fn dense(dim: usize, hidden: &[usize], sigma_g: f64, epochs: usize, seed: u64) -> Self {
        DsmConfig {
            sigma_g,
            network: DsmNetwork::Dense(DenseNetworkSpec::mlp(dim, hidden, dim, seed)),
            train: TrainConfig {
                final_learning_rate: Some(1e-5),
                ..TrainConfig::new(64, epochs, 1e-3, seed)
            },
        }
    }
}

/// Noise draw for corpus item `item` in `epoch`: fresh per epoch, fixed by
/// the seed.
fn noise(seed: u64, epoch: usize, item: usize, out: &mut [f64]) {
    let mut r = rng::stream(seed, rng::domain::DSM, ((epoch as u64) << 32) | item as u64);
    rng::fill_normal(&mut r, out);
}

struct DsmData<'a> {
    corpus: &'a [f64],
    dim: usize,
    sigma: f64,
    seed: u64,
}

impl RegressionData for DsmData<'_> {
    fn len(&self) -> usize {
        self.corpus.len() / self.dim
    }

    fn sample(&self, epoch: usize, item: usize, input: &mut [f64], target: &mut [f64]) -> f64 {
        noise(self.seed, epoch, item, target);
        let mu = &self.corpus[item * self.dim..(item + 1) * self.dim];
        for ((x, m), z) in input.iter_mut().zip(mu).zip(target.iter_mut()) {
            *x = m + self.sigma * *z;
            *z = -*z / self.sigma;
        }
        self.sigma * self.sigma
    }
}

/// Monte-Carlo denoising loss of `score` on `batch` (row-major), one noise
/// draw per item keyed by `noise_seed`.
pub fn dsm_loss_with<F: Fn(&[f64], &mut [f64])>(score: F, batch: &[f64], dim: usize, sigma: f64, noise_seed: u64) -> Result<f64> {
    let n = batch.len() / dim;
    if n == 0 {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let mut z = vec![0.0; dim];
    let mut x = vec![0.0; dim];
    let mut s = vec![0.0; dim];
    let mut total = 0.0;
    for (item, mu) in batch.chunks_exact(dim).enumerate() {
        noise(noise_seed, 0, item, &mut z);
        for ((xi, m), zi) in x.iter_mut().zip(mu).zip(&z) {
            *xi = m + sigma * zi;
        }
        score(&x, &mut s);
        total += s.iter().zip(&z).map(|(si, zi)| (sigma * si + zi).powi(2)).sum::<f64>();
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged { epoch: 0, loss });
    }
    Ok(loss)
}

pub fn dsm_loss<N: Network>(net: &N, params: &[f64], batch: &[f64], sigma: f64, noise_seed: u64) -> Result<f64> {
    let dim = net.input_len();
    if batch.len() % dim != 0 {
        return Err(Error::dim("batch width", dim, batch.len() % dim));
    }
    dsm_loss_with(|x, out| out.copy_from_slice(&net.forward_cached(params, x).0), batch, dim, sigma, noise_seed)
}

/// Trains a score network on a row-major corpus in normalized coordinates.
pub fn train_dsm(corpus: &[f64], dim: usize, config: &DsmConfig, normalization: Normalization) -> Result<(ScoreModel, TrainReport)> {
    if !(config.sigma_g > 0.0) {
        return Err(Error::InvalidParameter("sigma_g must be positive".into()));
    }
    let data = DsmData {
        corpus,
        dim,
        sigma: config.sigma_g,
        seed: config.train.seed,
    };
    if data.len() < config.train.batch_size {
        return Err(Error::InsufficientData(format!(
            "corpus of {} states is smaller than the batch size {}",
            data.len(),
            config.train.batch_size
        )));
    }
    let (net, params, report) = match &config.network {
        DsmNetwork::Dense(spec) => {
            let net = Mlp::try_new(spec.clone())?;
            check_width(net.input_len(), net.output_len(), dim)?;
            let mut params = net.init_params();
            let report = train(&net, &mut params, &data, &config.train)?;
            (ScoreNet::Dense(net), params, report)
        }
        DsmNetwork::Conv(spec) => {
            let net = UNet::new(spec.clone())?;
            check_width(net.input_len(), net.output_len(), dim)?;
            let mut params = net.init_params();
            let report = train(&net, &mut params, &data, &config.train)?;
            (ScoreNet::Conv(net), params, report)
        }
    };
    Ok((ScoreModel::Neural(NeuralScore::new(net, params, normalization)?), report))
}

fn check_width(input: usize, output: usize, dim: usize) -> Result<()> {
    if input != dim || output != dim {
        return Err(Error::dim("score network width", dim, input));
    }
    Ok(())
}

/// A scalar test function with its gradient, used in `⟨g s⟩ = −⟨∇g⟩`.
pub trait TestFunction {
    fn name(&self) -> String;
    fn value(&self, x: &[f64]) -> f64;
    /// Writes `∇g(x)` into `out`.
    fn gradient(&self, x: &[f64], out: &mut [f64]);
}

/// `g ≡ 1`.
pub struct Constant;

impl TestFunction for Constant {
    fn name(&self) -> String {
        "one".into()
    }
    fn value(&self, _x: &[f64]) -> f64 {
        1.0
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `g(x) = x_i`.
pub struct Coordinate(pub usize);

impl TestFunction for Coordinate {
    fn name(&self) -> String {
        format!("x{}", self.0)
    }
    fn value(&self, x: &[f64]) -> f64 {
        x[self.0]
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[self.0] = 1.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityResidual {
    pub observable: String,
    pub component: usize,
    pub residual: f64,
    pub stderr: f64,
}

impl IdentityResidual {
    /// |residual| in units of its standard error.
    pub fn z_score(&self) -> f64 {
        self.residual.abs() / self.stderr
    }
}

/// Row-major score values at every sample.
pub fn evaluate_scores<S: Score + ?Sized>(score: &S, samples: &[f64]) -> Vec<f64> {
    let d = score.dim();
    let mut out = vec![0.0; samples.len()];
    for (x, s) in samples.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        score.eval(x, s);
    }
    out
}

/// `⟨g(x) s_k(x)⟩ + ⟨∂_k g(x)⟩` for every test function and the requested
/// components, from precomputed scores. Standard errors come from block
/// means of length `block_len` (1 for independent samples).
pub fn identity_residuals(
    samples: &[f64],
    scores: &[f64],
    dim: usize,
    tests: &[&dyn TestFunction],
    components: &[usize],
    block_len: usize,
) -> Vec<IdentityResidual> {
    let n = samples.len() / dim;
    let mut grad = vec![0.0; dim];
    let mut out = Vec::new();
    for g in tests {
        let mut series = vec![Vec::with_capacity(n); components.len()];
        for (x, s) in samples.chunks_exact(dim).zip(scores.chunks_exact(dim)) {
            let v = g.value(x);
            g.gradient(x, &mut grad);
            for (ser, &k) in series.iter_mut().zip(components) {
                ser.push(v * s[k] + grad[k]);
            }
        }
        for (ser, &k) in series.iter().zip(components) {
            let (m, se) = stats::block_mean_se(ser, block_len);
            out.push(IdentityResidual {
                observable: g.name(),
                component: k,
                residual: m,
                stderr: se,
            });
        }
    }
    out
}

pub fn score_identity_residual<S: Score + ?Sized>(
    score: &S,
    samples: &[f64],
    tests: &[&dyn TestFunction],
    block_len: usize,
) -> Vec<IdentityResidual> {
    let dim = score.dim();
    let scores = evaluate_scores(score, samples);
    let components: Vec<usize> = (0..dim).collect();
    identity_residuals(samples, &scores, dim, tests, &components, block_len)
}

/// Per-component affine correction zeroing the `g = 1` and `g = x_i`
/// residuals on the given samples: `b_i = −⟨s_i⟩`, `a_i = −1/cov(x_i, s_i)`.
pub fn fit_affine_correction(samples: &[f64], scores: &[f64], dim: usize) -> Result<AffineCorrection> {
    let n = samples.len() / dim;
    if n < 2 {
        return Err(Error::InsufficientData("affine correction needs at least two samples".into()));
    }
    let mut mx = vec![0.0; dim];
    let mut ms = vec![0.0; dim];
    for (x, s) in samples.chunks_exact(dim).zip(scores.chunks_exact(dim)) {
        for k in 0..dim {
            mx[k] += x[k];
            ms[k] += s[k];
        }
    }
    mx.iter_mut().chain(ms.iter_mut()).for_each(|v| *v /= n as f64);
    let mut cov = vec![0.0; dim];
    for (x, s) in samples.chunks_exact(dim).zip(scores.chunks_exact(dim)) {
        for k in 0..dim {
            cov[k] += (x[k] - mx[k]) * (s[k] - ms[k]);
        }
    }
    let mut scale = Vec::with_capacity(dim);
    for (k, c) in cov.iter().enumerate() {
        let c = c / n as f64;
        if !(c < 0.0) {
            return Err(Error::DegenerateData(format!(
                "score component {k} is not anti-correlated with its coordinate (cov = {c:.3e})"
            )));
        }
        scale.push(-1.0 / c);
    }
    Ok(AffineCorrection {
        scale,
        shift: ms.iter().map(|m| -m).collect(),
    })
}

/// Columns `observable, component, residual, stderr`.
pub fn write_residuals_csv(path: &Path, rows: &[IdentityResidual]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "observable,component,residual,stderr")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.observable, r.component, r.residual, r.stderr)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{finite_difference, rel_err};
    use crate::nn::{gradient, Loss};
    use crate::score::{kgmm, AnalyticScore, GaussianScore};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 0, 0);
        let mut v = vec![0.0; n];
        rng::fill_normal(&mut r, &mut v);
        v
    }

    #[test]
    fn oracle_score_has_zero_loss() {
        // single-state batch: s(y) = −(y − μ)/σ² equals −z/σ exactly
        let mu = [0.3, -1.2];
        let sigma = 0.1;
        let l = dsm_loss_with(
            |y, out| {
                for k in 0..2 {
                    out[k] = -(y[k] - mu[k]) / (sigma * sigma);
                }
            },
            &mu,
            2,
            sigma,
            5,
        )
        .unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn zero_score_loss_is_dimension() {
        let dim = 4;
        let batch = normals(20_000 * dim, 1);
        let l = dsm_loss_with(|_, out| out.iter_mut().for_each(|v| *v = 0.0), &batch, dim, 0.2, 2).unwrap();
        // ‖z‖² has variance 2·dim
        let se = (2.0 * dim as f64 / 20_000.0).sqrt();
        assert!((l - dim as f64).abs() < 3.0 * se, "{l}");
    }

    #[test]
    fn loss_ignores_batch_order() {
        // reversing items together with their noise keys leaves the mean unchanged
        let net = Mlp::new(DenseNetworkSpec::mlp(2, &[4], 2, 3));
        let p = net.init_params();
        let batch = vec![0.1, 0.2, -0.5, 0.7, 1.0, -1.0];
        let a = dsm_loss(&net, &p.values, &batch, 0.3, 9).unwrap();
        let terms: Vec<f64> = (0..3)
            .map(|i| {
                let mut z = vec![0.0; 2];
                noise(9, 0, i, &mut z);
                let x: Vec<f64> = (0..2).map(|k| batch[i * 2 + k] + 0.3 * z[k]).collect();
                let s = net.forward(&p.values, &x).unwrap();
                s.iter().zip(&z).map(|(si, zi)| (0.3 * si + zi).powi(2)).sum::<f64>()
            })
            .collect();
        let b = (terms[2] + terms[1] + terms[0]) / 3.0;
        assert!((a - b).abs() < 1e-12);
    }

    struct DsmObjective {
        targets: Vec<Vec<f64>>,
        sigma: f64,
    }

    impl Loss for DsmObjective {
        fn output_term(&self, item: usize, output: &[f64], grad: &mut [f64]) -> f64 {
            let w = self.sigma * self.sigma;
            let mut l = 0.0;
            for ((o, t), g) in output.iter().zip(&self.targets[item]).zip(grad.iter_mut()) {
                l += w * (o - t) * (o - t);
                *g = 2.0 * w * (o - t);
            }
            l
        }
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let net = Mlp::new(DenseNetworkSpec::mlp(2, &[5], 2, 4));
        let p = net.init_params();
        let data = DsmData {
            corpus: &[0.2, -0.4, 1.0, 0.5],
            dim: 2,
            sigma: 0.3,
            seed: 1,
        };
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for i in 0..2 {
            let (mut x, mut t) = (vec![0.0; 2], vec![0.0; 2]);
            data.sample(0, i, &mut x, &mut t);
            inputs.push(x);
            targets.push(t);
        }
        let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let obj = DsmObjective { targets, sigma: 0.3 };
        let (l, g) = gradient(&net, &p.values, &refs, &obj).unwrap();
        let fd = finite_difference(&net, &p.values, &refs, &obj, 1e-5);
        assert!(rel_err(&g, &fd) < 1e-4);
        // same objective as the loss estimator
        let direct = dsm_loss(&net, &p.values, &[0.2, -0.4, 1.0, 0.5], 0.3, 1).unwrap();
        assert!((l / 2.0 - direct).abs() < 1e-12);
    }

    fn gaussian_corpus(n: usize, seed: u64) -> (Vec<f64>, GaussianScore) {
        // Σ = [[1, 0.6], [0.6, 1]] via Cholesky of unit normals
        let z = normals(2 * n, seed);
        let l21 = 0.6;
        let l22 = (1.0f64 - 0.36).sqrt();
        let mut x = Vec::with_capacity(2 * n);
        for p in z.chunks_exact(2) {
            x.push(p[0]);
            x.push(l21 * p[0] + l22 * p[1]);
        }
        (x, GaussianScore::new(vec![0.0, 0.0], &[1.0, 0.6, 0.6, 1.0]).unwrap())
    }

    #[test]
    fn gaussian_corpus_recovers_linear_score() {
        let (corpus, truth) = gaussian_corpus(4000, 3);
        let mut cfg = DsmConfig::dense(2, &[32, 32], 0.1, 60, 5);
        cfg.train.batch_size = 32;
        let (model, _) = train_dsm(&corpus, 2, &cfg, Normalization::identity(2)).unwrap();
        let (held, _) = gaussian_corpus(2000, 4);
        let (mut num, mut den) = (0.0, 0.0);
        for x in held.chunks_exact(2) {
            let s = model.eval_vec(x);
            let t = truth.eval_vec(x);
            num += s.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            den += t.iter().map(|b| b * b).sum::<f64>();
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.1, "relative L2 error {rel}");
    }

    #[test]
    fn identical_states_point_back() {
        let corpus = vec![0.5; 256];
        // the smoothed score has slope −1/σ² = −25, so start with a larger step
        let mut cfg = DsmConfig::dense(1, &[16], 0.2, 100, 6);
        cfg.train.batch_size = 16;
        cfg.train.learning_rate = 1e-2;
        cfg.train.final_learning_rate = Some(1e-4);
        let (model, _) = train_dsm(&corpus, 1, &cfg, Normalization::identity(1)).unwrap();
        // probe within one kernel width, where training inputs land
        for x in [0.32, 0.4, 0.6, 0.68] {
            let s = model.eval_vec(&[x])[0];
            assert!(s * (0.5 - x) > 0.0, "score {s} at {x}");
        }
    }

    #[test]
    fn dsm_agrees_with_kgmm_in_1d() {
        let corpus = normals(20_000, 7);
        let mut cfg = DsmConfig::dense(1, &[32, 16], 0.1, 20, 8);
        cfg.train.batch_size = 64;
        let (dsm, _) = train_dsm(&corpus, 1, &cfg, Normalization::identity(1)).unwrap();
        let mut kc = kgmm::KgmmConfig::new(1, 0.1, 60, 9);
        kc.train.epochs = 300;
        let fit = kgmm::kgmm(&corpus, 1, &kc, Normalization::identity(1)).unwrap();
        for j in 0..fit.table.len() {
            let c = fit.table.centroid(j)[0];
            if fit.table.low_confidence[j] || c.abs() > 2.0 {
                continue;
            }
            let d = dsm.eval_vec(&[c])[0];
            let k = fit.table.score(j)[0];
            // table error bar plus a 0.1 allowance for the network fit
            assert!((d - k).abs() < 3.0 * fit.table.stderr[j] + 0.1, "at {c}: dsm {d}, kgmm {k}");
        }
    }

    #[test]
    fn identity_residuals_for_gaussian() {
        let (x, truth) = gaussian_corpus(50_000, 10);
        let r = score_identity_residual(&truth, &x, &[&Constant, &Coordinate(0), &Coordinate(1)], 1);
        assert_eq!(r.len(), 6);
        for e in &r {
            assert!(e.z_score() < 4.0, "{e:?}");
        }
    }

    #[test]
    fn biased_score_shifts_constant_residual() {
        let (x, truth) = gaussian_corpus(1000, 11);
        let biased = AnalyticScore::new(2, move |p, out| {
            truth.eval(p, out);
            out[0] += 0.7;
        });
        let (x0, _) = gaussian_corpus(1000, 11);
        let unbiased = GaussianScore::new(vec![0.0, 0.0], &[1.0, 0.6, 0.6, 1.0]).unwrap();
        let a = score_identity_residual(&biased, &x, &[&Constant], 1);
        let b = score_identity_residual(&unbiased, &x0, &[&Constant], 1);
        assert!((a[0].residual - b[0].residual - 0.7).abs() < 1e-12);
        assert!((a[1].residual - b[1].residual).abs() < 1e-12);
    }

    #[test]
    fn affine_correction_zeroes_training_residuals() {
        let (x, _) = gaussian_corpus(5000, 12);
        // a wrongly scaled and shifted diagonal score
        let wrong = AnalyticScore::new(2, |p, out| {
            out[0] = -0.5 * p[0] + 0.3;
            out[1] = -2.0 * p[1] - 0.1;
        });
        let s = evaluate_scores(&wrong, &x);
        let c = fit_affine_correction(&x, &s, 2).unwrap();
        let fixed = ScoreModel::Corrected(Box::new(ScoreModel::Analytic(wrong)), c);
        for e in score_identity_residual(&fixed, &x, &[&Constant, &Coordinate(0), &Coordinate(1)], 1) {
            let diag = e.observable == "one" || e.observable == format!("x{}", e.component);
            if diag {
                assert!(e.residual.abs() < 1e-10, "{e:?}");
            }
        }
    }

    #[test]
    fn residual_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![IdentityResidual {
            observable: "one".into(),
            component: 3,
            residual: 0.5,
            stderr: 0.1,
        }];
        write_residuals_csv(&p, &rows).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "observable,component,residual,stderr\none,3,0.5,0.1\n");
    }

    #[test]
    fn training_is_reproducible() {
        let (corpus, _) = gaussian_corpus(200, 13);
        let mut cfg = DsmConfig::dense(2, &[8], 0.1, 3, 2);
        cfg.train.batch_size = 16;
        let a = train_dsm(&corpus, 2, &cfg, Normalization::identity(2)).unwrap().1;
        let b = train_dsm(&corpus, 2, &cfg, Normalization::identity(2)).unwrap().1;
        assert_eq!(a, b);
    }
}

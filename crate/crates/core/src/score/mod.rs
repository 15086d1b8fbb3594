//! Score functions `s(x) = ∇ln ρ(x)` and their estimators.

pub mod dsm;
pub mod kgmm;
mod kdtree;

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::nn::{Mlp, Network, NetworkParams, UNet};
use crate::sde::Normalization;
use crate::{Error, Result};

pub use kdtree::KdTree;

/// An evaluable score field on `ℝⁿ`.
pub trait Score {
    fn dim(&self) -> usize;

    /// Writes `s(x)` into `out`.
    fn eval(&self, x: &[f64], out: &mut [f64]);

    fn eval_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval(x, &mut out);
        out
    }
}

impl<S: Score + ?Sized> Score for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (**self).eval(x, out)
    }
}

/// Score of `N(μ, Σ)`: `−Σ⁻¹(x − μ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScore {
    pub mean: Vec<f64>,
    /// Row-major `Σ⁻¹`.
    pub precision: Vec<f64>,
}

impl GaussianScore {
    pub fn new(mean: Vec<f64>, covariance: &[f64]) -> Result<Self> {
        let n = mean.len();
        if covariance.len() != n * n {
            return Err(Error::dim("covariance entries", n * n, covariance.len()));
        }
        let precision = invert_spd(covariance, n)?;
        Ok(GaussianScore { mean, precision })
    }

    /// Fit to row-major samples with population covariance.
    pub fn fit(samples: &[f64], dim: usize) -> Result<Self> {
        let t = samples.len() / dim.max(1);
        if dim == 0 || t < 2 {
            return Err(Error::InsufficientData("Gaussian score needs at least two samples".into()));
        }
        let mut mean = vec![0.0; dim];
        for r in samples.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut cov = vec![0.0; dim * dim];
        let mut c = vec![0.0; dim];
        for r in samples.chunks_exact(dim) {
            for ((ci, v), m) in c.iter_mut().zip(r).zip(&mean) {
                *ci = v - m;
            }
            for i in 0..dim {
                let ci = c[i];
                for j in i..dim {
                    cov[i * dim + j] += ci * c[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / t as f64;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Self::new(mean, &cov)
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky. Fails with
/// a condition-number estimate when the matrix is (numerically) singular.
pub(crate) fn invert_spd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let m = DMatrix::from_row_slice(n, n, a);
    let chol = match m.clone().cholesky() {
        Some(c) => c,
        None => {
            let ev = m.symmetric_eigenvalues();
            let max = ev.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            let min = ev.iter().cloned().fold(f64::INFINITY, |a, b| a.min(b.abs()));
            return Err(Error::SingularCovariance { condition: max / min });
        }
    };
    let d = chol.l_dirty().diagonal();
    let dmax = d.iter().cloned().fold(0.0f64, f64::max);
    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
    // (max L_ii / min L_ii)² is a lower bound on the condition number
    let condition = (dmax / dmin).powi(2);
    if !(condition < 1e12) {
        return Err(Error::SingularCovariance { condition });
    }
    let inv = chol.inverse();
    Ok((0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| inv[(i, j)]).collect())
}

impl Score for GaussianScore {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let n = self.mean.len();
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (o, row) in out.iter_mut().zip(self.precision.chunks_exact(n)) {
            *o = -row.iter().zip(&c).map(|(p, v)| p * v).sum::<f64>();
        }
    }
}

/// Network architectures a neural score can use.
#[derive(Debug, Clone)]
pub enum ScoreNet {
    Dense(Mlp),
    Conv(UNet),
}

impl ScoreNet {
    fn forward(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        match self {
            ScoreNet::Dense(m) => m.eval_into(params, x, out),
            ScoreNet::Conv(u) => out.copy_from_slice(&u.forward_cached(params, x).0),
        }
    }

    fn dim(&self) -> usize {
        match self {
            ScoreNet::Dense(m) => m.input_len(),
            ScoreNet::Conv(u) => u.input_len(),
        }
    }
}

/// A network trained in normalized coordinates. `normalization` maps the
/// coordinates the score is evaluated in to the training coordinates, and
/// the chain rule is applied on the way out.
#[derive(Debug, Clone)]
pub struct NeuralScore {
    pub net: ScoreNet,
    pub params: NetworkParams,
    pub normalization: Normalization,
}

impl NeuralScore {
    pub fn new(net: ScoreNet, params: NetworkParams, normalization: Normalization) -> Result<Self> {
        if normalization.dim() != net.dim() {
            return Err(Error::dim("score normalization", net.dim(), normalization.dim()));
        }
        Ok(NeuralScore {
            net,
            params,
            normalization,
        })
    }
}

impl Score for NeuralScore {
    fn dim(&self) -> usize {
        self.net.dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let mut y = x.to_vec();
        self.normalization.apply(&mut y);
        self.net.forward(&self.params.values, &y, out);
        for (o, s) in out.iter_mut().zip(&self.normalization.std) {
            *o /= s;
        }
    }
}

/// Per-component affine fix `s'ᵢ = aᵢ (sᵢ + bᵢ)` chosen so that the
/// integration-by-parts identities hold for `g = 1` and `g = xᵢ` on the
/// data it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCorrection {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl AffineCorrection {
    pub fn apply(&self, s: &mut [f64]) {
        for ((v, a), b) in s.iter_mut().zip(&self.scale).zip(&self.shift) {
            *v = a * (*v + b);
        }
    }
}

/// Closure-backed score, e.g. a closed-form expression.
#[derive(Clone)]
pub struct AnalyticScore {
    pub dim: usize,
    pub f: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
}

impl std::fmt::Debug for AnalyticScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AnalyticScore {{ dim: {} }}", self.dim)
    }
}

impl AnalyticScore {
    pub fn new(dim: usize, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        AnalyticScore { dim, f: Arc::new(f) }
    }
}

impl Score for AnalyticScore {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

#[derive(Debug, Clone)]
pub enum ScoreModel {
    Analytic(AnalyticScore),
    Gaussian(GaussianScore),
    Neural(NeuralScore),
    Corrected(Box<ScoreModel>, AffineCorrection),
}

impl ScoreModel {
    pub fn method(&self) -> &'static str {
        match self {
            ScoreModel::Analytic(_) => "analytic",
            ScoreModel::Gaussian(_) => "gaussian",
            ScoreModel::Neural(_) => "neural",
            ScoreModel::Corrected(inner, _) => inner.method(),
        }
    }
}

impl Score for ScoreModel {
    fn dim(&self) -> usize {
        match self {
            ScoreModel::Analytic(s) => s.dim(),
            ScoreModel::Gaussian(s) => s.dim(),
            ScoreModel::Neural(s) => s.dim(),
            ScoreModel::Corrected(s, _) => s.dim(),
        }
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            ScoreModel::Analytic(s) => s.eval(x, out),
            ScoreModel::Gaussian(s) => s.eval(x, out),
            ScoreModel::Neural(s) => s.eval(x, out),
            ScoreModel::Corrected(s, c) => {
                s.eval(x, out);
                c.apply(out);
            }
        }
    }
}

/// Gaussian score fitted to samples (quasi-Gaussian approximation).
pub fn gaussian_score(samples: &[f64], dim: usize) -> Result<ScoreModel> {
    Ok(ScoreModel::Gaussian(GaussianScore::fit(samples, dim)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn normalized_1d_gaussian_score_is_minus_x() {
        let xs = [-1.0, 1.0, -1.0, 1.0];
        let s = gaussian_score(&xs, 1).unwrap();
        assert_eq!(s.eval_vec(&[0.7]), vec![-0.7]);
        assert_eq!(s.eval_vec(&[0.0]), vec![0.0]);
    }

    #[test]
    fn correlated_2d_gaussian() {
        let g = GaussianScore::new(vec![0.0, 0.0], &[1.0, 0.5, 0.5, 1.0]).unwrap();
        let s = g.eval_vec(&[1.0, 0.0]);
        assert!((s[0] + 4.0 / 3.0).abs() < 1e-12);
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn score_vanishes_at_mean() {
        let mut r = rng::stream(1, 0, 0);
        let xs: Vec<f64> = (0..3000).map(|_| rng::normal(&mut r) * 2.0 + 1.0).collect();
        let g = GaussianScore::fit(&xs, 3).unwrap();
        let s = g.eval_vec(&g.mean.clone());
        assert!(s.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn singular_covariance_reports_condition() {
        let xs = [1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        match gaussian_score(&xs, 2) {
            Err(Error::SingularCovariance { condition }) => assert!(condition > 1e12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn neural_score_applies_chain_rule() {
        use crate::nn::{Activation, DenseNetworkSpec};
        // network s̃(y) = −y in normalized coordinates of N(3, 2²) is −(x−3)/4
        let net = Mlp::new(DenseNetworkSpec {
            layer_widths: vec![1, 1],
            activations: vec![Activation::Identity],
            seed: 0,
        });
        let norm = Normalization {
            mean: vec![3.0],
            std: vec![2.0],
        };
        let s = NeuralScore::new(ScoreNet::Dense(net), NetworkParams::new(vec![-1.0, 0.0]), norm).unwrap();
        assert!((s.eval_vec(&[5.0])[0] + 0.5).abs() < 1e-15);
    }
}

//! Linear response from unperturbed statistics.
//!
//! Forcing `ẋ = F(x) + u(x) f(t) + σ ξ` changes the mean of an observable `A`
//! by `⟨δA(t)⟩ = ∫₀ᵗ R(t − t′) f(t′) dt′` with impulse response
//! `R(t) = ⟨A(x(t)) B(x(0))⟩`, where the conjugate observable is
//! `B(x) = −∇·u(x) − u(x)·s(x)` and `s` is the stationary score.

mod response;
mod truth;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::score::Score;
use crate::sde::Normalization;
use crate::{Error, Result};

pub use response::{convolve_response, moment_deltas, raw_from_central, response_series, MomentDeltas};
pub use truth::{ensemble_truth, TruthProtocol};

/// Affine forcing direction `u(x) = M x + b` with its divergence `tr M`
/// stored at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub dim: usize,
    /// Row-major `M`; `None` for a state-independent field.
    pub matrix: Option<Vec<f64>>,
    pub offset: Vec<f64>,
    pub divergence: f64,
}

impl Perturbation {
    /// State-independent forcing along `direction`.
    pub fn constant(direction: Vec<f64>) -> Self {
        Perturbation {
            dim: direction.len(),
            matrix: None,
            offset: direction,
            divergence: 0.0,
        }
    }

    /// Unit forcing of component `i`.
    pub fn unit(dim: usize, i: usize) -> Result<Self> {
        if i >= dim {
            return Err(Error::InvalidParameter(format!("component {i} out of range for dimension {dim}")));
        }
        let mut d = vec![0.0; dim];
        d[i] = 1.0;
        Ok(Self::constant(d))
    }

    pub fn affine(matrix: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        let dim = offset.len();
        if matrix.len() != dim * dim {
            return Err(Error::dim("perturbation matrix", dim * dim, matrix.len()));
        }
        let divergence = (0..dim).map(|i| matrix[i * dim + i]).sum();
        Ok(Perturbation {
            dim,
            matrix: Some(matrix),
            offset,
            divergence,
        })
    }

    /// Change `δ` of the fast-variable damping in the slow–fast triad:
    /// `u(x) = (0, 0, −δ·τ)`.
    pub fn triad_damping(delta: f64) -> Self {
        let mut m = vec![0.0; 9];
        m[8] = -delta;
        Self::affine(m, vec![0.0; 3]).expect("3×3 field")
    }

    pub fn is_constant(&self) -> bool {
        self.matrix.is_none()
    }

    pub fn field(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.offset);
        if let Some(m) = &self.matrix {
            for (o, row) in out.iter_mut().zip(m.chunks_exact(self.dim)) {
                *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Perturbation {
            dim: self.dim,
            matrix: self.matrix.as_ref().map(|m| m.iter().map(|v| alpha * v).collect()),
            offset: self.offset.iter().map(|v| alpha * v).collect(),
            divergence: alpha * self.divergence,
        }
    }

    /// The same forcing seen in normalized coordinates `x̃ = S⁻¹(x − μ)`:
    /// `ũ(x̃) = S⁻¹ M S x̃ + S⁻¹(M μ + b)`. The divergence is unchanged.
    pub fn to_normalized(&self, norm: &Normalization) -> Result<Self> {
        if norm.dim() != self.dim {
            return Err(Error::dim("normalization", self.dim, norm.dim()));
        }
        let n = self.dim;
        let (mu, s) = (&norm.mean, &norm.std);
        let mut offset = self.offset.clone();
        let matrix = self.matrix.as_ref().map(|m| {
            for i in 0..n {
                offset[i] += (0..n).map(|j| m[i * n + j] * mu[j]).sum::<f64>();
            }
            (0..n * n).map(|k| m[k] * s[k % n] / s[k / n]).collect::<Vec<f64>>()
        });
        for (o, si) in offset.iter_mut().zip(s) {
            *o /= si;
        }
        Ok(Perturbation {
            dim: n,
            matrix,
            offset,
            divergence: self.divergence,
        })
    }
    /// Inverse of [`to_normalized`](Self::to_normalized): a field given in
    /// normalized coordinates mapped back to physical ones,
    /// `M = S M̃ S⁻¹`, `b = S b̃ − M μ`.
    pub fn to_physical(&self, norm: &Normalization) -> Result<Self> {
        if norm.dim() != self.dim {
            return Err(Error::dim("normalization", self.dim, norm.dim()));
        }
        let n = self.dim;
        let (mu, s) = (&norm.mean, &norm.std);
        let mut offset: Vec<f64> = self.offset.iter().zip(s).map(|(b, si)| b * si).collect();
        let matrix = self.matrix.as_ref().map(|m| {
            let m: Vec<f64> = (0..n * n).map(|k| m[k] * s[k / n] / s[k % n]).collect();
            for i in 0..n {
                offset[i] -= (0..n).map(|j| m[i * n + j] * mu[j]).sum::<f64>();
            }
            m
        });
        Ok(Perturbation {
            dim: n,
            matrix,
            offset,
            divergence: self.divergence,
        })
    }
}

/// `B(x) = −∇·u(x) − u(x)·s(x)`.
pub struct Conjugate<'a, S: ?Sized> {
    pub score: &'a S,
    pub perturbation: &'a Perturbation,
}

pub fn conjugate<'a, S: Score + ?Sized>(score: &'a S, perturbation: &'a Perturbation) -> Result<Conjugate<'a, S>> {
    if score.dim() != perturbation.dim {
        return Err(Error::dim("conjugate observable", perturbation.dim, score.dim()));
    }
    Ok(Conjugate { score, perturbation })
}

impl<S: Score + ?Sized> Conjugate<'_, S> {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut s = vec![0.0; x.len()];
        let mut u = vec![0.0; x.len()];
        self.score.eval(x, &mut s);
        self.perturbation.field(x, &mut u);
        -self.perturbation.divergence - u.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `B` at every row of a row-major sample set.
    pub fn series(&self, samples: &[f64]) -> Vec<f64> {
        let n = self.perturbation.dim;
        let mut s = vec![0.0; n];
        let mut u = vec![0.0; n];
        samples
            .chunks_exact(n)
            .map(|x| {
                self.score.eval(x, &mut s);
                self.perturbation.field(x, &mut u);
                -self.perturbation.divergence - u.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

/// `(x_i − μ_i)^n`, or `x_i^n` when not centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentObservable {
    pub component: usize,
    pub order: u32,
    pub centered: bool,
    pub mean: f64,
}

impl MomentObservable {
    pub fn central(component: usize, order: u32, mean: f64) -> Self {
        MomentObservable {
            component,
            order,
            centered: true,
            mean,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let v = x[self.component] - if self.centered { self.mean } else { 0.0 };
        v.powi(self.order as i32)
    }

    pub fn id(&self) -> String {
        format!("x{}_m{}", self.component + 1, self.order)
    }
}

/// Temporal profile `f(t)` of a perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Impulse,
    Constant(f64),
    /// `f` sampled on the response lag grid.
    Sampled(Vec<f64>),
}

/// `R(t)` on a lag grid with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSeries {
    pub lags: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub observable: String,
    pub method: String,
}

impl ResponseSeries {
    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    pub fn lag_step(&self) -> f64 {
        if self.lags.len() > 1 {
            self.lags[1] - self.lags[0]
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.lags.len() || self.stderr.len() != self.lags.len() {
            return Err(Error::dim("response series columns", self.lags.len(), self.values.len()));
        }
        if self.lags.first().is_some_and(|l| *l != 0.0) || self.lags.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::GridMismatch("lags must increase strictly from 0".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        ResponseSeries {
            values: self.values.iter().map(|v| alpha * v).collect(),
            stderr: self.stderr.iter().map(|v| alpha.abs() * v).collect(),
            ..self.clone()
        }
    }

    /// Columns `lag, value, stderr, observable, method`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_series_csv(path, std::slice::from_ref(self))
    }
}

pub fn write_series_csv(path: &Path, series: &[ResponseSeries]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "lag,value,stderr,observable,method")?;
    for s in series {
        for i in 0..s.len() {
            writeln!(w, "{},{},{},{},{}", s.lags[i], s.values[i], s.stderr[i], s.observable, s.method)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every series of a CSV written by [`write_series_csv`], in order of
/// first appearance.
pub fn read_series_csv(path: &Path) -> Result<Vec<ResponseSeries>> {
    let r = BufReader::new(File::open(path)?);
    let mut out: Vec<ResponseSeries> = Vec::new();
    for (i, line) in r.lines().enumerate().skip(1) {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Format(format!("line {}: expected 5 fields", i + 1)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", i + 1)));
        let (lag, value, se) = (num(f[0])?, num(f[1])?, num(f[2])?);
        let pos = out.iter().position(|s| s.observable == f[3] && s.method == f[4]);
        let s = match pos {
            Some(p) => &mut out[p],
            None => {
                out.push(ResponseSeries {
                    lags: vec![],
                    values: vec![],
                    stderr: vec![],
                    observable: f[3].to_string(),
                    method: f[4].to_string(),
                });
                out.last_mut().unwrap()
            }
        };
        s.lags.push(lag);
        s.values.push(value);
        s.stderr.push(se);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{AnalyticScore, GaussianScore};

    #[test]
    fn gaussian_constant_unit_gives_x() {
        let g = GaussianScore::new(vec![0.0], &[1.0]).unwrap();
        let u = Perturbation::unit(1, 0).unwrap();
        let b = conjugate(&g, &u).unwrap();
        for x in [-2.0, 0.0, 1.5] {
            assert_eq!(b.eval(&[x]), x);
        }
    }

    #[test]
    fn zero_field_gives_zero() {
        let g = GaussianScore::new(vec![0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let u = Perturbation::constant(vec![0.0, 0.0]);
        assert_eq!(conjugate(&g, &u).unwrap().eval(&[0.3, 0.4]), 0.0);
    }

    #[test]
    fn triad_damping_field() {
        let p = Perturbation::triad_damping(-0.4);
        assert!((p.divergence - 0.4).abs() < 1e-15);
        let mut u = [0.0; 3];
        p.field(&[1.0, 2.0, 3.0], &mut u);
        assert!((u[2] - 1.2).abs() < 1e-12 && u[0] == 0.0 && u[1] == 0.0);
        // u vanishes at τ = 0, so B = −div u whatever the score
        let s = AnalyticScore::new(3, |x, o| o.copy_from_slice(&[x[0], -5.0, 7.0]));
        let b = conjugate(&s, &p).unwrap();
        assert!((b.eval(&[0.3, -1.0, 0.0]) + 0.4).abs() < 1e-15);
    }

    #[test]
    fn gaussian_conjugate_is_affine_with_precision_row() {
        let cov = [2.0, 0.3, 0.3, 0.5];
        let g = GaussianScore::new(vec![0.1, -0.2], &cov).unwrap();
        let u = Perturbation::unit(2, 1).unwrap();
        let b = conjugate(&g, &u).unwrap();
        let h = 1.0;
        let base = b.eval(&[0.1, -0.2]);
        assert!(base.abs() < 1e-15);
        let dx = b.eval(&[0.1 + h, -0.2]) - base;
        let dy = b.eval(&[0.1, -0.2 + h]) - base;
        assert!((dx - g.precision[2]).abs() < 1e-12 && (dy - g.precision[3]).abs() < 1e-12);
    }

    #[test]
    fn linearity_in_field() {
        let s = AnalyticScore::new(2, |x, o| {
            o[0] = -x[0].powi(3);
            o[1] = x[0] - x[1];
        });
        let p = Perturbation::affine(vec![0.2, 0.1, -0.3, 0.5], vec![1.0, -1.0]).unwrap();
        let q = p.scaled(2.5);
        let x = [0.7, -0.4];
        let a = conjugate(&s, &p).unwrap().eval(&x);
        let b = conjugate(&s, &q).unwrap().eval(&x);
        assert!((b - 2.5 * a).abs() < 1e-12);
    }

    #[test]
    fn normalized_field_matches_physical() {
        let p = Perturbation::affine(vec![0.2, 0.1, -0.3, 0.5], vec![1.0, -1.0]).unwrap();
        let norm = Normalization {
            mean: vec![2.0, -1.0],
            std: vec![0.5, 3.0],
        };
        let q = p.to_normalized(&norm).unwrap();
        let x = [1.3, 0.8];
        let mut xt = x;
        norm.apply(&mut xt);
        let (mut u, mut ut) = ([0.0; 2], [0.0; 2]);
        p.field(&x, &mut u);
        q.field(&xt, &mut ut);
        for i in 0..2 {
            assert!((ut[i] - u[i] / norm.std[i]).abs() < 1e-12);
        }
        assert_eq!(q.divergence, p.divergence);
    }

    #[test]
    fn physical_inverts_normalized() {
        let p = Perturbation::affine(vec![0.2, 0.1, -0.3, 0.5], vec![1.0, -1.0]).unwrap();
        let norm = Normalization {
            mean: vec![2.0, -1.0],
            std: vec![0.5, 3.0],
        };
        let back = p.to_normalized(&norm).unwrap().to_physical(&norm).unwrap();
        for (a, b) in back.matrix.unwrap().iter().chain(&back.offset).zip(p.matrix.unwrap().iter().chain(&p.offset)) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = Perturbation::unit(2, 1).unwrap().to_physical(&norm).unwrap();
        assert!(c.is_constant() && c.offset == vec![0.0, 3.0]);
    }

    #[test]
    fn series_csv_round_trip() {
        let a = ResponseSeries {
            lags: vec![0.0, 0.1],
            values: vec![1.0, 0.5],
            stderr: vec![0.01, 0.02],
            observable: "x1_m1".into(),
            method: "gfdt-analytic".into(),
        };
        let b = ResponseSeries {
            method: "ensemble-truth".into(),
            ..a.clone()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_series_csv(&p, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_series_csv(&p).unwrap(), vec![a, b]);
    }
}

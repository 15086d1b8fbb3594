//! Maximum-entropy densities `ρ(x) = exp(Σᵢ λᵢ xⁱ)` on a bounded interval
//! matching prescribed moments `m₀ = 1, m₁, …, m_N` (`N ≤ 4`).
//!
//! The multipliers minimize the convex dual `ln Z(λ) − Σ_{i≥1} λᵢ mᵢ`.
//! Several starting points are polished with Nelder–Mead, then the best is
//! driven to the tolerance by Levenberg-damped Newton steps whose Jacobian
//! (the covariance of the monomials) comes from adaptive quadrature.

mod nelder_mead;
pub mod quadrature;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Target moments `m₀..m_N` of the monomial basis on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub moments: Vec<f64>,
    pub domain: (f64, f64),
}

impl MomentSet {
    pub fn new(moments: Vec<f64>, domain: (f64, f64)) -> Result<Self> {
        let s = MomentSet { moments, domain };
        s.validate()?;
        Ok(s)
    }

    pub fn order(&self) -> usize {
        self.moments.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.domain;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!("bad domain [{lo}, {hi}]")));
        }
        if self.moments.is_empty() || self.moments.len() > MAX_ORDER + 1 {
            return Err(Error::InvalidMoments(format!("need 1 to {} moments, got {}", MAX_ORDER + 1, self.moments.len())));
        }
        if (self.moments[0] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMoments(format!("m0 must be 1, got {}", self.moments[0])));
        }
        if self.moments.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidMoments("non-finite moment".into()));
        }
        if let Some(m1) = self.moments.get(1) {
            if !(lo < *m1 && *m1 < hi) {
                return Err(Error::InvalidMoments(format!("mean {m1} outside the domain")));
            }
        }
        self.check_hankel()
    }

    /// The Hankel matrix `[m_{i+j}]` built from the available moments must
    /// be positive definite.
    fn check_hankel(&self) -> Result<()> {
        let k = self.order() / 2 + 1;
        if k < 2 {
            return Ok(());
        }
        let h = DMatrix::from_fn(k, k, |i, j| self.moments[i + j]);
        let ok = h.clone().cholesky().is_some_and(|c| {
            let d = c.l().diagonal();
            let (mx, mn) = d.iter().fold((0.0f64, f64::INFINITY), |(a, b), v| (a.max(*v), b.min(*v)));
            mn / mx > 1e-7
        });
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidMoments(format!("Hankel matrix of order {} is not positive definite", k - 1)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartStrategy {
    /// Only the Gaussian matched to the first two moments.
    GaussianOnly,
    /// Gaussian plus skew-tilted variants.
    MultiStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxentConfig {
    /// Bound on `max |achieved − target|`.
    pub tol: f64,
    pub starts: StartStrategy,
    pub max_newton_iters: usize,
    pub nelder_mead_evals: usize,
    pub quadrature_tol: f64,
}

impl Default for MaxentConfig {
    fn default() -> Self {
        MaxentConfig {
            tol: 1e-7,
            starts: StartStrategy::MultiStart,
            max_newton_iters: 100,
            nelder_mead_evals: 2000,
            quadrature_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxentSolution {
    /// `λ₀..λ_N`, with `λ₀ = −ln Z`.
    pub lambda: Vec<f64>,
    pub domain: (f64, f64),
    pub target: Vec<f64>,
    pub achieved: Vec<f64>,
    pub residual: f64,
    /// Index of the starting point that converged.
    pub start: usize,
}

impl MaxentSolution {
    pub fn log_density(&self, x: f64) -> f64 {
        poly(&self.lambda, x)
    }

    /// `ρ(x)`, zero outside the domain.
    pub fn density(&self, x: f64) -> f64 {
        if x < self.domain.0 || x > self.domain.1 {
            0.0
        } else {
            self.log_density(x).exp()
        }
    }

    pub fn density_eval(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.density(x)).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }

    /// `x, density` on `points` equally spaced nodes spanning the domain.
    pub fn write_density_csv(&self, path: &Path, points: usize) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "x,density")?;
        for x in grid(self.domain, points) {
            writeln!(w, "{x},{}", self.density(x))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Equally spaced nodes including both ends.
pub fn grid(domain: (f64, f64), points: usize) -> Vec<f64> {
    let (lo, hi) = domain;
    let n = points.max(2);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, ci| acc * x + ci)
}

/// Moments `∫ xᵏ ρ` for `k = 0..=order` of the normalized version of an
/// unnormalized log-density.
pub fn density_moments<F: Fn(f64) -> f64>(log_density: F, domain: (f64, f64), order: usize, tol: f64) -> Vec<f64> {
    let shift = grid(domain, 4001).into_iter().map(&log_density).fold(f64::NEG_INFINITY, f64::max);
    let raw = quadrature::integrate(
        |x, out| {
            let w = (log_density(x) - shift).exp();
            let mut p = w;
            for o in out.iter_mut() {
                *o = p;
                p *= x;
            }
        },
        domain.0,
        domain.1,
        order + 1,
        tol,
    );
    raw.iter().map(|m| m / raw[0]).collect()
}

/// Monomial expectations `E[yᵏ]`, `k = 0..=2N`, and `ln Z` under
/// `exp(Σ_{i≥1} λᵢ yⁱ)` on `domain`.
struct Dual {
    domain: (f64, f64),
    target: Vec<f64>,
    quad_tol: f64,
}

struct DualEval {
    log_z: f64,
    expect: Vec<f64>,
}

impl Dual {
    fn order(&self) -> usize {
        self.target.len() - 1
    }

    fn eval(&self, free: &[f64]) -> DualEval {
        let n = self.order();
        let mut coeff = vec![0.0; n + 1];
        coeff[1..].copy_from_slice(free);
        let shift = grid(self.domain, 2001)
            .into_iter()
            .map(|x| poly(&coeff, x))
            .fold(f64::NEG_INFINITY, f64::max);
        let raw = quadrature::integrate(
            |x, out| {
                let w = (poly(&coeff, x) - shift).exp();
                let mut p = w;
                for o in out.iter_mut() {
                    *o = p;
                    p *= x;
                }
            },
            self.domain.0,
            self.domain.1,
            2 * n + 1,
            self.quad_tol,
        );
        let z = raw[0];
        DualEval {
            log_z: shift + z.ln(),
            expect: raw.iter().map(|m| m / z).collect(),
        }
    }

    fn objective(&self, free: &[f64]) -> f64 {
        let e = self.eval(free);
        let v = e.log_z - free.iter().zip(&self.target[1..]).map(|(l, m)| l * m).sum::<f64>();
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    }

    fn residual(&self, e: &DualEval) -> f64 {
        (1..=self.order())
            .map(|i| (e.expect[i] - self.target[i]).abs())
            .fold(0.0, f64::max)
    }

    /// Levenberg-damped Newton on the dual. Returns the multipliers and the
    /// final residual.
    fn newton(&self, start: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, f64) {
        let n = self.order();
        let mut lam = start.to_vec();
        let mut e = self.eval(&lam);
        let mut obj = self.objective(&lam);
        let mut res = self.residual(&e);
        let mut mu = 1e-3;
        for _ in 0..max_iter {
            if res < tol || !res.is_finite() {
                break;
            }
            let g = DVector::from_fn(n, |i, _| e.expect[i + 1] - self.target[i + 1]);
            let h = DMatrix::from_fn(n, n, |i, j| e.expect[i + j + 2] - e.expect[i + 1] * e.expect[j + 1]);
            let mut accepted = false;
            for _ in 0..40 {
                let mut a = h.clone();
                for i in 0..n {
                    a[(i, i)] *= 1.0 + mu;
                }
                let Some(step) = a.lu().solve(&(-&g)) else {
                    mu *= 10.0;
                    continue;
                };
                let trial: Vec<f64> = lam.iter().zip(step.iter()).map(|(l, s)| l + s).collect();
                let t_obj = self.objective(&trial);
                if t_obj.is_finite() && t_obj <= obj + 1e-14 * obj.abs().max(1.0) {
                    let t_e = self.eval(&trial);
                    let t_res = self.residual(&t_e);
                    if t_obj < obj || t_res < res {
                        lam = trial;
                        e = t_e;
                        obj = t_obj;
                        res = t_res;
                        mu = (mu / 3.0).max(1e-12);
                        accepted = true;
                        break;
                    }
                }
                mu *= 4.0;
            }
            if !accepted {
                break;
            }
        }
        (lam, res)
    }
}

/// Solves for the maximum-entropy multipliers matching `moments`.
pub fn solve_maxent(moments: &MomentSet, config: &MaxentConfig) -> Result<MaxentSolution> {
    moments.validate()?;
    let n = moments.order();
    let (lo, hi) = moments.domain;
    if n == 0 {
        let lambda = vec![-(hi - lo).ln()];
        return Ok(MaxentSolution {
            lambda,
            domain: moments.domain,
            target: moments.moments.clone(),
            achieved: vec![1.0],
            residual: 0.0,
            start: 0,
        });
    }
    // work in y = x / c so the monomials are of order one
    let c = if n >= 2 { moments.moments[2].sqrt() } else { 1.0 };
    let target: Vec<f64> = moments.moments.iter().enumerate().map(|(i, m)| m / c.powi(i as i32)).collect();
    let dual = Dual {
        domain: (lo / c, hi / c),
        target: target.clone(),
        quad_tol: config.quadrature_tol,
    };

    let starts = starting_points(&target, config.starts);
    let mut polished: Vec<(usize, Vec<f64>, f64)> = starts
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let step: Vec<f64> = s.iter().map(|v| 0.1 * v.abs().max(0.5)).collect();
            let (x, _) = nelder_mead::minimize(|p| dual.objective(p), s, &step, config.nelder_mead_evals, 1e-15);
            let r = dual.residual(&dual.eval(&x));
            debug!("maxent start {k}: residual after simplex {r:.3e}");
            (k, x, if r.is_finite() { r } else { f64::INFINITY })
        })
        .collect();
    polished.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));

    let mut best = f64::INFINITY;
    for (k, x, _) in &polished {
        let (free, res) = dual.newton(x, config.tol, config.max_newton_iters);
        debug!("maxent start {k}: residual after Newton {res:.3e}");
        if res < config.tol {
            let e = dual.eval(&free);
            let mut lambda: Vec<f64> = std::iter::once(-e.log_z).chain(free.iter().copied()).collect();
            for (i, l) in lambda.iter_mut().enumerate() {
                *l /= c.powi(i as i32);
            }
            lambda[0] -= c.ln();
            let achieved: Vec<f64> = e.expect[..=n].iter().enumerate().map(|(i, m)| m * c.powi(i as i32)).collect();
            let residual = achieved
                .iter()
                .zip(&moments.moments)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            return Ok(MaxentSolution {
                lambda,
                domain: moments.domain,
                target: moments.moments.clone(),
                achieved,
                residual,
                start: *k,
            });
        }
        best = best.min(if res.is_finite() { res } else { f64::INFINITY });
    }
    Err(Error::MaxentNonConvergence { residual: best })
}

/// Free multipliers `λ₁..λ_N` (scaled coordinates) of each start.
fn starting_points(target: &[f64], strategy: StartStrategy) -> Vec<Vec<f64>> {
    let n = target.len() - 1;
    let mean = target[1];
    let var = if n >= 2 { (target[2] - mean * mean).max(1e-6) } else { 1.0 };
    let mut gauss = vec![0.0; n];
    gauss[0] = if n >= 2 { mean / var } else { 0.0 };
    if n >= 2 {
        gauss[1] = -0.5 / var;
    }
    let mut out = vec![gauss.clone()];
    if strategy == StartStrategy::MultiStart && n >= 3 {
        for tilt in [0.1, -0.1] {
            let mut s = gauss.clone();
            s[2] = tilt;
            if n >= 4 {
                // keep the tails decaying under the tilt
                s[3] = -0.05;
            }
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const DOMAIN: (f64, f64) = (-10.0, 10.0);

    #[test]
    fn standard_normal() {
        let m = MomentSet::new(vec![1.0, 0.0, 1.0], DOMAIN).unwrap();
        let s = solve_maxent(&m, &MaxentConfig::default()).unwrap();
        let want = [-0.5 * (2.0 * std::f64::consts::PI).ln(), 0.0, -0.5];
        for (a, b) in s.lambda.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{:?}", s.lambda);
        }
        assert!((s.density(0.0) - 0.398_942_280_4).abs() < 1e-6);
    }

    #[test]
    fn no_constraints_is_uniform() {
        let m = MomentSet::new(vec![1.0], (0.0, 1.0)).unwrap();
        let s = solve_maxent(&m, &MaxentConfig::default()).unwrap();
        assert_eq!(s.lambda, vec![0.0]);
        assert_eq!(s.density(0.3), 1.0);
    }

    #[test]
    fn rejects_bad_moments() {
        assert!(matches!(MomentSet::new(vec![0.9, 0.0, 1.0], DOMAIN), Err(Error::InvalidMoments(_))));
        // variance −0.5
        assert!(matches!(MomentSet::new(vec![1.0, 1.0, 0.5], DOMAIN), Err(Error::InvalidMoments(_))));
        assert!(MomentSet::new(vec![1.0; 6], DOMAIN).is_err());
    }

    fn quartic_family(lam: &[f64]) -> Vec<f64> {
        let l = lam.to_vec();
        density_moments(move |x| poly(&l, x), DOMAIN, lam.len() - 1, 1e-13)
    }

    #[test]
    fn round_trip_random_families() {
        let mut r = crate::rng::stream(21, 0, 0);
        let mut done = 0;
        while done < 8 {
            let n = r.gen_range(2..=4);
            let mut lam = vec![0.0; n + 1];
            for l in lam.iter_mut().skip(1) {
                *l = r.gen_range(-0.5..0.5);
            }
            // decaying tails
            lam[n] = if n % 2 == 0 { -r.gen_range(0.05..0.5) } else { r.gen_range(-0.05..0.05) };
            if n == 3 {
                lam.push(-0.1);
            }
            let m = quartic_family(&lam);
            let Ok(set) = MomentSet::new(m.clone(), DOMAIN) else {
                continue;
            };
            let s = solve_maxent(&set, &MaxentConfig::default()).unwrap();
            let back = density_moments(|x| s.log_density(x), DOMAIN, set.order(), 1e-13);
            for (a, b) in back.iter().zip(&m) {
                assert!((a - b).abs() < 1e-6, "{back:?} vs {m:?}");
            }
            done += 1;
        }
    }

    #[test]
    fn recovers_known_multipliers() {
        let lam = [0.0, 0.3, -0.4, 0.05, -0.08];
        let m = quartic_family(&lam);
        let s = solve_maxent(&MomentSet::new(m, DOMAIN).unwrap(), &MaxentConfig::default()).unwrap();
        for (a, b) in s.lambda[1..].iter().zip(&lam[1..]) {
            assert!((a - b).abs() < 1e-4, "{:?}", s.lambda);
        }
    }

    #[test]
    fn density_integrates_to_one_and_is_positive() {
        let m = quartic_family(&[0.0, -0.2, -0.3, 0.1, -0.1]);
        let s = solve_maxent(&MomentSet::new(m, DOMAIN).unwrap(), &MaxentConfig::default()).unwrap();
        let xs = grid(DOMAIN, 2001);
        assert!(s.density_eval(&xs).iter().all(|v| *v >= 0.0));
        let z = quadrature::integrate(|x, o| o[0] = s.density(x), DOMAIN.0, DOMAIN.1, 1, 1e-12)[0];
        assert!((z - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shift_covariance() {
        let lam = [0.0, 0.1, -0.5, 0.08, -0.05];
        let m = quartic_family(&lam);
        let shift = 0.7;
        let m_shift = super::super::gfdt::raw_from_central(shift, &m);
        let a = solve_maxent(&MomentSet::new(m, DOMAIN).unwrap(), &MaxentConfig::default()).unwrap();
        let b = solve_maxent(&MomentSet::new(m_shift, DOMAIN).unwrap(), &MaxentConfig::default()).unwrap();
        for x in grid((-4.0, 4.0), 81) {
            let (pa, pb) = (a.density(x), b.density(x + shift));
            assert!((pa - pb).abs() < 1e-3 * pa.max(1e-3), "x {x}: {pa} vs {pb}");
        }
    }

    #[test]
    fn json_and_csv() {
        let s = solve_maxent(&MomentSet::new(vec![1.0, 0.2, 1.1], DOMAIN).unwrap(), &MaxentConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        s.write_json(&p).unwrap();
        assert_eq!(MaxentSolution::read_json(&p).unwrap(), s);
        let c = dir.path().join("d.csv");
        s.write_density_csv(&c, 11).unwrap();
        assert_eq!(std::fs::read_to_string(c).unwrap().lines().count(), 12);
    }
}

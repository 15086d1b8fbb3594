//! Configuration-driven runs: simulate, estimate the score, predict
//! responses, measure them with ensembles and compare, writing every
//! artifact under one output directory with a hashed manifest.

mod config;
mod manifest;
mod run;

pub use config::{
    small_conv_dsm, ExperimentConfig, LangevinConfig, MaxentStageConfig, ModelConfig, ObservableConfig,
    PerturbationConfig, ResponseConfig, ScoreConfig, ScoreMethod, SimulationConfig, TruthConfig, KGMM_MAX_DIM,
};
pub use manifest::{Artifact, RunManifest, StageRecord};
pub use run::{run_experiment, Experiment, MaxentRecord, NormalizedScore, PdfRecord, Stage};

use serde::{Deserialize, Serialize};

use crate::gfdt::ResponseSeries;
use crate::stats;
use crate::{Error, Result};

/// Agreement between a candidate response series and a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetrics {
    pub rmse: f64,
    /// `rmse / max |reference|`.
    pub normalized_rmse: f64,
    pub max_abs_deviation: f64,
    /// Fraction of the first quarter of the lags where both series have
    /// the same sign.
    pub sign_agreement: f64,
    /// Fraction of lags where the difference is within three combined
    /// standard errors.
    pub within_3se: f64,
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Compares `candidate` against `reference` on their common lag grid.
pub fn compare_series(reference: &ResponseSeries, candidate: &ResponseSeries) -> Result<SeriesMetrics> {
    let n = reference.len();
    if n == 0 || candidate.len() != n {
        return Err(Error::GridMismatch(format!(
            "series of lengths {n} and {} cannot be compared",
            candidate.len()
        )));
    }
    let tol = 1e-9 * reference.lags.last().copied().unwrap_or(0.0).abs().max(1.0);
    if let Some(k) = (0..n).find(|&k| (reference.lags[k] - candidate.lags[k]).abs() > tol) {
        return Err(Error::GridMismatch(format!(
            "lag {k} differs: {} vs {}",
            reference.lags[k], candidate.lags[k]
        )));
    }
    let diff: Vec<f64> = reference.values.iter().zip(&candidate.values).map(|(a, b)| b - a).collect();
    let rmse = (diff.iter().map(|d| d * d).sum::<f64>() / n as f64).sqrt();
    let scale = reference.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let early = n.div_ceil(4);
    let agree = (0..early)
        .filter(|&k| sign(reference.values[k]) == sign(candidate.values[k]))
        .count();
    let se = |s: &ResponseSeries, k: usize| s.stderr.get(k).copied().filter(|v| v.is_finite()).unwrap_or(0.0);
    let within = (0..n)
        .filter(|&k| {
            let c = (se(reference, k).powi(2) + se(candidate, k).powi(2)).sqrt();
            diff[k].abs() <= 3.0 * c
        })
        .count();
    Ok(SeriesMetrics {
        rmse,
        normalized_rmse: if scale > 0.0 { rmse / scale } else { f64::INFINITY },
        max_abs_deviation: diff.iter().fold(0.0f64, |m, d| m.max(d.abs())),
        sign_agreement: agree as f64 / early as f64,
        within_3se: within as f64 / n as f64,
    })
}

/// L1 distance between normalized histograms of a reference sample set `a`
/// and `b`, binned over the range of `a`. `bins` defaults to the
/// Freedman–Diaconis count of the smaller set.
pub fn histogram_compare(a: &[f64], b: &[f64], bins: Option<usize>) -> f64 {
    let bins = bins.unwrap_or_else(|| {
        let small = if a.len() <= b.len() { a } else { b };
        stats::freedman_diaconis_bins(small)
    });
    stats::histogram_l1(a, b, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn series(values: Vec<f64>, se: f64) -> ResponseSeries {
        ResponseSeries {
            lags: (0..values.len()).map(|k| 0.1 * k as f64).collect(),
            stderr: vec![se; values.len()],
            values,
            observable: "x1_m1".into(),
            method: "test".into(),
        }
    }

    fn decay() -> Vec<f64> {
        (0..200).map(|k| (-0.05 * k as f64).exp() * (0.1 * k as f64).cos()).collect()
    }

    #[test]
    fn identical_series() {
        let a = series(decay(), 0.01);
        let m = compare_series(&a, &a).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.sign_agreement, 1.0);
        assert_eq!(m.within_3se, 1.0);
    }

    #[test]
    fn negated_series() {
        let a = series(decay(), 0.0);
        let b = series(decay().iter().map(|v| -v).collect(), 0.0);
        let m = compare_series(&a, &b).unwrap();
        assert_eq!(m.sign_agreement, 0.0);
        assert!((m.max_abs_deviation - 2.0).abs() < 1e-12);
    }

    #[test]
    fn injected_noise_sets_the_rmse() {
        let sigma = 0.02;
        let truth = decay();
        let mut r = rng::stream(5, 0, 0);
        let noisy: Vec<f64> = truth.iter().map(|v| v + sigma * rng::normal(&mut r)).collect();
        let m = compare_series(&series(truth, 0.0), &series(noisy, sigma)).unwrap();
        // RMSE of 200 normals has relative spread about 1/√400
        assert!((m.rmse / sigma - 1.0).abs() < 0.2, "{}", m.rmse);
        assert!((m.normalized_rmse - m.rmse).abs() < 1e-12);
        assert!(m.within_3se > 0.97);
    }

    #[test]
    fn grid_mismatch() {
        let a = series(decay(), 0.0);
        let mut b = a.clone();
        b.lags[3] += 0.05;
        assert!(matches!(compare_series(&a, &b), Err(Error::GridMismatch(_))));
        b.values.pop();
        b.lags.pop();
        assert!(matches!(compare_series(&a, &b), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn histogram_edges() {
        let a = [0.1, 0.5, 0.9, 1.3];
        assert_eq!(histogram_compare(&a, &a, None), 0.0);
        let b = [5.1, 5.5, 5.9, 6.3];
        assert!((histogram_compare(&a, &b, Some(10)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn independent_normal_sets_are_close() {
        let draw = |seed| {
            let mut r = rng::stream(seed, 0, 0);
            let mut v = vec![0.0; 1_000_000];
            rng::fill_normal(&mut r, &mut v);
            v
        };
        let d = histogram_compare(&draw(1), &draw(2), Some(100));
        assert!(d < 0.02, "{d}");
    }
}

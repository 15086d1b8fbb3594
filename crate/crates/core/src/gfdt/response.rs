use log::warn;

use super::{MomentObservable, Profile, ResponseSeries};
use crate::sde::Trajectory;
use crate::stats;
use crate::{Error, Result};

/// Minimum number of time origins per lag.
const MIN_PAIRS: usize = 1000;

/// `R(t_k) = ⟨A(x(t_k)) B(x(0))⟩` for each observable, on lags that are
/// multiples of `lag_stride` trajectory rows up to `max_lag` time units.
///
/// `conjugate` holds `B` at every row of `traj`. Both factors are centered
/// on their sample means, which leaves the estimate unchanged when
/// `⟨B⟩ = 0` and removes the bias an imperfect score would add. Standard
/// errors come from non-overlapping block means of the lagged products.
pub fn response_series(
    traj: &Trajectory,
    observables: &[MomentObservable],
    conjugate: &[f64],
    max_lag: f64,
    lag_stride: usize,
    method: &str,
) -> Result<Vec<ResponseSeries>> {
    let n = traj.len();
    if conjugate.len() != n {
        return Err(Error::dim("conjugate series", n, conjugate.len()));
    }
    if lag_stride == 0 || !(max_lag >= 0.0) {
        return Err(Error::InvalidParameter("lag stride must be positive and max lag non-negative".into()));
    }
    if let Some(o) = observables.iter().find(|o| o.component >= traj.dim()) {
        return Err(Error::InvalidParameter(format!("observable {} outside dimension {}", o.id(), traj.dim())));
    }
    let h = traj.sample_interval();
    let max_rows = (max_lag / h).round() as usize;
    let max_rows = max_rows - max_rows % lag_stride;
    if n < max_rows + MIN_PAIRS {
        return Err(Error::InsufficientData(format!(
            "{n} rows cover lags up to {max_rows} rows with fewer than {MIN_PAIRS} origins; need at least {} rows",
            max_rows + MIN_PAIRS
        )));
    }
    let b_mean = stats::mean(conjugate);
    let b: Vec<f64> = conjugate.iter().map(|v| v - b_mean).collect();
    let tau = stats::decorrelation_lag(&b, (-1.0f64).exp(), (n / 20).max(1));
    let lags: Vec<usize> = (0..=max_rows).step_by(lag_stride).collect();

    let mut out = Vec::with_capacity(observables.len());
    let mut products = Vec::with_capacity(n);
    for obs in observables {
        let mut a: Vec<f64> = traj.rows().map(|x| obs.value(x)).collect();
        let a_mean = stats::mean(&a);
        a.iter_mut().for_each(|v| *v -= a_mean);
        let mut values = Vec::with_capacity(lags.len());
        let mut stderr = Vec::with_capacity(lags.len());
        for &k in &lags {
            let pairs = n - k;
            products.clear();
            products.extend((0..pairs).map(|m| a[m + k] * b[m]));
            let block = stats::block_length(pairs, tau, 20);
            let (r, se) = stats::block_mean_se(&products, block);
            values.push(r);
            stderr.push(se);
        }
        out.push(ResponseSeries {
            lags: lags.iter().map(|&k| k as f64 * h).collect(),
            values,
            stderr,
            observable: obs.id(),
            method: method.to_string(),
        });
    }
    Ok(out)
}

/// `⟨δA(t)⟩ = ∫₀ᵗ R(t − t′) f(t′) dt′` on the lag grid of `series`
/// (trapezoid rule). An impulse returns `R` itself.
pub fn convolve_response(series: &ResponseSeries, profile: &Profile) -> Result<Vec<f64>> {
    series.validate()?;
    let r = &series.values;
    let h = series.lag_step();
    match profile {
        Profile::Impulse => Ok(r.clone()),
        Profile::Constant(eps) => {
            let mut out = Vec::with_capacity(r.len());
            let mut acc = 0.0;
            out.push(0.0);
            for w in r.windows(2) {
                acc += 0.5 * h * (w[0] + w[1]);
                out.push(eps * acc);
            }
            out.truncate(r.len());
            Ok(out)
        }
        Profile::Sampled(f) => {
            if f.len() > r.len() {
                return Err(Error::GridMismatch(format!(
                    "forcing covers {} lags but the response only {}",
                    f.len(),
                    r.len()
                )));
            }
            Ok((0..f.len())
                .map(|k| {
                    if k == 0 {
                        return 0.0;
                    }
                    let s: f64 = (0..=k)
                        .map(|j| {
                            let w = if j == 0 || j == k { 0.5 } else { 1.0 };
                            w * r[k - j] * f[j]
                        })
                        .sum();
                    h * s
                })
                .collect())
        }
    }
}

/// Long-time moment changes predicted by the response series.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentDeltas {
    /// `δm_n` for orders `1..=N`, in the order the series were given.
    pub deltas: Vec<f64>,
    pub warnings: Vec<String>,
}

impl MomentDeltas {
    /// Perturbed central moments about the fixed unperturbed mean, given
    /// `central[n] = ⟨(x − μ)ⁿ⟩₀` for `n = 0..=N`.
    pub fn perturbed_central(&self, central: &[f64]) -> Result<Vec<f64>> {
        if central.len() != self.deltas.len() + 1 {
            return Err(Error::dim("central moments", self.deltas.len() + 1, central.len()));
        }
        let mut out = central.to_vec();
        for (o, d) in out[1..].iter_mut().zip(&self.deltas) {
            *o += d;
        }
        Ok(out)
    }
}

/// Raw moments `⟨xⁿ⟩` from moments about `mean` (binomial expansion).
pub fn raw_from_central(mean: f64, central: &[f64]) -> Vec<f64> {
    (0..central.len())
        .map(|n| {
            let mut binom = 1.0;
            let mut s = 0.0;
            for (k, c) in central.iter().enumerate().take(n + 1) {
                s += binom * mean.powi((n - k) as i32) * c;
                binom *= (n - k) as f64 / (k + 1) as f64;
            }
            s
        })
        .collect()
}

/// Plateau values of the convolved responses: the mean over the last tenth
/// of `[0, horizon]`. A plateau that still drifts by more than 5% of the
/// largest excursion between the last two tenths gets a warning.
pub fn moment_deltas(series: &[ResponseSeries], profile: &Profile, horizon: f64) -> Result<MomentDeltas> {
    let mut deltas = Vec::with_capacity(series.len());
    let mut warnings = Vec::new();
    for s in series {
        let conv = convolve_response(s, profile)?;
        let h = s.lag_step();
        let end = if h > 0.0 { (horizon / h).round() as usize + 1 } else { 1 };
        if end > conv.len() {
            return Err(Error::GridMismatch(format!(
                "horizon {horizon} exceeds the lag coverage of {}",
                s.observable
            )));
        }
        let tenth = (end / 10).max(1);
        let last = stats::mean(&conv[end - tenth..end]);
        deltas.push(last);
        if end >= 2 * tenth {
            let prev = stats::mean(&conv[end - 2 * tenth..end - tenth]);
            let scale = conv[..end].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if (last - prev).abs() > 0.05 * scale && scale > 0.0 {
                let msg = format!("{}: plateau not converged by t = {horizon} ({prev:.4e} -> {last:.4e})", s.observable);
                warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    Ok(MomentDeltas { deltas, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gfdt::{conjugate, Perturbation};
    use crate::score::{AnalyticScore, GaussianScore};
    use crate::sde::{euler_maruyama, EmConfig, OuModel, ScalarModel};

    fn exp_series(h: f64, n: usize) -> ResponseSeries {
        let lags: Vec<f64> = (0..n).map(|k| k as f64 * h).collect();
        ResponseSeries {
            values: lags.iter().map(|t| (-t).exp()).collect(),
            stderr: vec![0.0; n],
            lags,
            observable: "x1_m1".into(),
            method: "test".into(),
        }
    }

    #[test]
    fn impulse_returns_series() {
        let s = exp_series(0.1, 50);
        assert_eq!(convolve_response(&s, &Profile::Impulse).unwrap(), s.values);
    }

    #[test]
    fn constant_forcing_integrates_exponential() {
        let s = exp_series(0.01, 1001);
        let eps = 0.3;
        let c = convolve_response(&s, &Profile::Constant(eps)).unwrap();
        for (t, v) in s.lags.iter().zip(&c) {
            assert!((v - eps * (1.0 - (-t).exp())).abs() < 1e-5);
        }
    }

    #[test]
    fn sampled_constant_matches_constant_and_zero_gives_zero() {
        let s = exp_series(0.05, 200);
        let a = convolve_response(&s, &Profile::Constant(2.0)).unwrap();
        let b = convolve_response(&s, &Profile::Sampled(vec![2.0; 200])).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let z = convolve_response(&s, &Profile::Sampled(vec![0.0; 100])).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(convolve_response(&s, &Profile::Sampled(vec![0.0; 201])).is_err());
    }

    #[test]
    fn plateau_is_integral() {
        let s = exp_series(0.01, 2001);
        let d = moment_deltas(&[s.clone()], &Profile::Constant(0.5), 20.0).unwrap();
        assert!((d.deltas[0] - 0.5).abs() < 1e-4);
        assert!(d.warnings.is_empty());
        let z = moment_deltas(&[s.clone()], &Profile::Constant(0.0), 20.0).unwrap();
        assert_eq!(z.deltas, vec![0.0]);
        // a ramp never settles
        let ramp = ResponseSeries {
            values: vec![1.0; 2001],
            ..s
        };
        assert_eq!(moment_deltas(&[ramp], &Profile::Constant(1.0), 20.0).unwrap().warnings.len(), 1);
    }

    #[test]
    fn raw_moments_from_central() {
        // N(2, 1): raw moments 1, 2, 5, 14
        let raw = raw_from_central(2.0, &[1.0, 0.0, 1.0, 0.0]);
        let want = [1.0, 2.0, 5.0, 14.0];
        for (a, b) in raw.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn insufficient_data_reports_length() {
        let t = Trajectory::new(1, 0.1, 1, vec![0.0; 500]).unwrap();
        let obs = [MomentObservable::central(0, 1, 0.0)];
        match response_series(&t, &obs, &vec![0.0; 500], 1.0, 1, "x") {
            Err(Error::InsufficientData(msg)) => assert!(msg.contains("1010")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ou_response_is_exponential() {
        // dx = −x dt + √2 dW: unit-variance stationary law, R(t) = e^{−t}
        let mut cfg = EmConfig::new(0.01, 2_000_000);
        cfg.stride = 10;
        cfg.burn_in = 10.0;
        let traj = euler_maruyama(OuModel::standard(1), &[0.0], &cfg, 7).unwrap();
        let g = GaussianScore::new(vec![0.0], &[1.0]).unwrap();
        let u = Perturbation::unit(1, 0).unwrap();
        let b = conjugate(&g, &u).unwrap().series(traj.states());
        let r = &response_series(&traj, &[MomentObservable::central(0, 1, 0.0)], &b, 3.0, 1, "gfdt-analytic").unwrap()[0];
        assert_eq!(r.len(), 31);
        for k in 0..r.len() {
            let want = (-r.lags[k]).exp();
            assert!((r.values[k] - want).abs() < 4.0 * r.stderr[k] + 0.02, "lag {}: {} vs {want}", r.lags[k], r.values[k]);
        }
    }

    #[test]
    fn scalar_lag_zero_identities() {
        let model = ScalarModel::default();
        let mut cfg = EmConfig::new(0.01, 3_000_000);
        cfg.stride = 10;
        cfg.burn_in = 100.0;
        let traj = euler_maruyama(&model, &[0.0], &cfg, 11).unwrap();
        let (norm_traj, norm) = traj.normalize().unwrap();
        let (mu, sd) = (norm.mean[0], norm.std[0]);
        let m = model.clone();
        let score = AnalyticScore::new(1, move |x, o| o[0] = sd * m.score(mu + sd * x[0]));
        let u = Perturbation::unit(1, 0).unwrap();
        let b = conjugate(&score, &u).unwrap().series(norm_traj.states());
        let obs: Vec<MomentObservable> = (1..=4).map(|n| MomentObservable::central(0, n, 0.0)).collect();
        let rs = response_series(&norm_traj, &obs, &b, 0.0, 1, "gfdt-analytic").unwrap();
        let x = norm_traj.column(0);
        for (n, r) in (1..=4).zip(&rs) {
            let want = n as f64 * stats::mean(&x.iter().map(|v| v.powi(n - 1)).collect::<Vec<_>>());
            let (got, se) = (r.values[0], r.stderr[0]);
            assert!((got - want).abs() < 3.0 * se, "order {n}: {got} vs {want} (se {se})");
        }
    }
}

use serde::{Deserialize, Serialize};

use super::{MomentObservable, Perturbation, ResponseSeries};
use crate::rng;
use crate::sde::{EnsembleSpec, Forced, Normalization, SdeModel, Stepper, Trajectory};
use crate::stats;
use crate::{Error, Result};

/// How the forcing is applied to the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthProtocol {
    /// Kick `x → x ± ε u(x)` at `t = 0`; estimates `R(t)`.
    Impulse,
    /// Add `± ε u(x)` to the drift from `t = 0` on; estimates `∫₀ᵗ R`.
    Step,
}

/// Ensemble estimate of the response of each observable to `perturbation`.
///
/// Each member starts from a row of `initial` (physical coordinates), runs
/// the unperturbed dynamics for `spec.burn_in`, then splits into a `+ε` and
/// a `−ε` copy driven by the same noise. The member response is
/// `(A(x₊) − A(x₋)) / 2ε`, which cancels the `O(ε)` bias of a one-sided
/// difference; the series is the member mean with its standard error.
/// Observables are evaluated on states mapped through `norm`.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_truth<M: SdeModel>(
    model: &M,
    perturbation: &Perturbation,
    epsilon: f64,
    protocol: TruthProtocol,
    spec: &EnsembleSpec,
    initial: &Trajectory,
    dt: f64,
    stride: usize,
    observables: &[MomentObservable],
    norm: &Normalization,
) -> Result<Vec<ResponseSeries>> {
    spec.validate()?;
    let n = model.dim();
    if perturbation.dim != n || initial.dim() != n || norm.dim() != n {
        return Err(Error::dim("ensemble truth", n, perturbation.dim));
    }
    if !(dt > 0.0) || stride == 0 {
        return Err(Error::InvalidParameter("dt and stride must be positive".into()));
    }
    if initial.len() < spec.n_members {
        return Err(Error::InsufficientData(format!(
            "{} members requested but only {} initial states supplied",
            spec.n_members,
            initial.len()
        )));
    }
    let burn = (spec.burn_in / dt).round() as usize;
    let steps = (spec.horizon / dt).round() as usize;
    let n_out = steps / stride + 1;
    let n_obs = observables.len();
    // per member, per lag, per observable
    let mut samples = vec![0.0; spec.n_members * n_out * n_obs];

    let sign_eps = match protocol {
        TruthProtocol::Impulse => 0.0,
        TruthProtocol::Step => epsilon,
    };
    let plus = Forced { base: model, extra: |x: &[f64], out: &mut [f64]| add_field(perturbation, sign_eps, x, out) };
    let minus = Forced { base: model, extra: |x: &[f64], out: &mut [f64]| add_field(perturbation, -sign_eps, x, out) };
    let mut base = Stepper::new(model, dt);
    let mut sp = Stepper::new(plus, dt);
    let mut sm = Stepper::new(minus, dt);
    let mut z = vec![0.0; model.noise_dim()];
    let mut u = vec![0.0; n];
    let (mut yp, mut ym) = (vec![0.0; n], vec![0.0; n]);
    let scale = if epsilon != 0.0 { 1.0 / (2.0 * epsilon) } else { 0.0 };

    for m in 0..spec.n_members {
        let mut r = rng::stream(spec.seed, rng::domain::ENSEMBLE, m as u64);
        let mut x = initial.row(spec.initial_row(m, initial.len())).to_vec();
        for step in 0..burn {
            base.step(&mut x, &mut r);
            check(&x, step)?;
        }
        let (mut xp, mut xm) = (x.clone(), x);
        if protocol == TruthProtocol::Impulse {
            perturbation.field(&xp, &mut u);
            for i in 0..n {
                xp[i] += epsilon * u[i];
                xm[i] -= epsilon * u[i];
            }
        }
        let mut record = |k: usize, xp: &[f64], xm: &[f64]| {
            yp.copy_from_slice(xp);
            ym.copy_from_slice(xm);
            norm.apply(&mut yp);
            norm.apply(&mut ym);
            let off = (m * n_out + k) * n_obs;
            for (j, o) in observables.iter().enumerate() {
                samples[off + j] = scale * (o.value(&yp) - o.value(&ym));
            }
        };
        record(0, &xp, &xm);
        for k in 0..steps {
            rng::fill_normal(&mut r, &mut z);
            sp.step_with(&mut xp, &z);
            sm.step_with(&mut xm, &z);
            check(&xp, burn + k)?;
            check(&xm, burn + k)?;
            if (k + 1) % stride == 0 {
                record((k + 1) / stride, &xp, &xm);
            }
        }
    }

    let members = spec.n_members as f64;
    let lags: Vec<f64> = (0..n_out).map(|k| (k * stride) as f64 * dt).collect();
    Ok(observables
        .iter()
        .enumerate()
        .map(|(j, o)| {
            let mut values = Vec::with_capacity(n_out);
            let mut stderr = Vec::with_capacity(n_out);
            let mut col = Vec::with_capacity(spec.n_members);
            for k in 0..n_out {
                col.clear();
                col.extend((0..spec.n_members).map(|m| samples[(m * n_out + k) * n_obs + j]));
                values.push(stats::mean(&col));
                let var = if spec.n_members > 1 {
                    stats::variance(&col) * members / (members - 1.0)
                } else {
                    f64::NAN
                };
                stderr.push((var / members).sqrt());
            }
            ResponseSeries {
                lags: lags.clone(),
                values,
                stderr,
                observable: o.id(),
                method: "ensemble-truth".into(),
            }
        })
        .collect())
}

fn add_field(p: &Perturbation, eps: f64, x: &[f64], out: &mut [f64]) {
    if eps == 0.0 {
        return;
    }
    let mut u = vec![0.0; out.len()];
    p.field(x, &mut u);
    for (o, v) in out.iter_mut().zip(&u) {
        *o += eps * v;
    }
}

fn check(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            step,
            hint: "ensemble member diverged; reduce dt or the perturbation amplitude",
        })
    }
}

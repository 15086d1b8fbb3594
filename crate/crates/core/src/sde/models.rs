use serde::{Deserialize, Serialize};

use super::SdeModel;
use crate::{Error, Result};

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(what.to_string()))
    }
}

/// Scalar model `ẋ = F + a x + b x² − c x³ + σ ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub forcing: f64,
    pub sigma: f64,
}

impl Default for ScalarParams {
    fn default() -> Self {
        ScalarParams {
            a: -0.0222,
            b: -0.2,
            c: 0.0494,
            forcing: 0.6,
            sigma: 0.7071,
        }
    }
}

impl ScalarParams {
    pub fn validate(&self) -> Result<()> {
        check(self.c > 0.0, "scalar model needs c > 0")?;
        check(self.sigma > 0.0, "scalar model needs sigma > 0")
    }

    /// Same model with the constant forcing shifted by `eps`.
    pub fn with_extra_forcing(mut self, eps: f64) -> Self {
        self.forcing += eps;
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScalarModel {
    pub params: ScalarParams,
}

impl ScalarModel {
    pub fn new(params: ScalarParams) -> Result<Self> {
        params.validate()?;
        Ok(ScalarModel { params })
    }

    fn force(&self, x: f64) -> f64 {
        let p = &self.params;
        p.forcing + x * (p.a + x * (p.b - p.c * x))
    }

    /// Exact stationary score `2 F(x) / σ²`.
    pub fn score(&self, x: f64) -> f64 {
        2.0 * self.force(x) / (self.params.sigma * self.params.sigma)
    }

    /// Unnormalized stationary log-density `−2 U(x) / σ²`.
    pub fn log_density(&self, x: f64) -> f64 {
        let p = &self.params;
        let u = p.forcing * x + p.a / 2.0 * x * x + p.b / 3.0 * x.powi(3) - p.c / 4.0 * x.powi(4);
        2.0 * u / (p.sigma * p.sigma)
    }
}

impl SdeModel for ScalarModel {
    fn dim(&self) -> usize {
        1
    }
    fn name(&self) -> &str {
        "scalar"
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.force(x[0]);
    }
    fn noise(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.params.sigma;
    }
    fn is_additive(&self) -> bool {
        true
    }
    fn add_noise(&self, _x: &[f64], w: &[f64], out: &mut [f64]) {
        out[0] += self.params.sigma * w[0];
    }
}

/// Slow–fast triad with state-dependent noise on the fast variable:
/// `σ_τ(u₁) = tau_noise·(tanh u₁ + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriadParams {
    pub d_u: f64,
    pub omega: f64,
    pub d_tau: f64,
    pub sigma_u1: f64,
    pub sigma_u2: f64,
    pub tau_noise: f64,
}

impl Default for TriadParams {
    fn default() -> Self {
        TriadParams {
            d_u: 0.2,
            omega: 0.4,
            d_tau: 2.0,
            sigma_u1: 0.3,
            sigma_u2: 0.3,
            tau_noise: 1.5,
        }
    }
}

impl TriadParams {
    pub fn validate(&self) -> Result<()> {
        check(self.d_u > 0.0 && self.d_tau > 0.0, "triad damping rates must be positive")?;
        check(
            self.sigma_u1 >= 0.0 && self.sigma_u2 >= 0.0 && self.tau_noise >= 0.0,
            "triad noise amplitudes must be non-negative",
        )
    }
}

#[derive(Debug, Clone)]
pub struct TriadModel {
    pub params: TriadParams,
}

impl TriadModel {
    pub fn new(params: TriadParams) -> Result<Self> {
        params.validate()?;
        Ok(TriadModel { params })
    }

    pub fn sigma_tau(&self, u1: f64) -> f64 {
        self.params.tau_noise * (u1.tanh() + 1.0)
    }
}

impl SdeModel for TriadModel {
    fn dim(&self) -> usize {
        3
    }
    fn name(&self) -> &str {
        "triad"
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let p = &self.params;
        let (u1, u2, tau) = (x[0], x[1], x[2]);
        out[0] = -p.d_u * u1 - p.omega * u2 + tau;
        out[1] = -p.d_u * u2 + p.omega * u1;
        out[2] = -p.d_tau * tau;
    }
    fn noise(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = self.params.sigma_u1;
        out[4] = self.params.sigma_u2;
        out[8] = self.sigma_tau(x[0]);
    }
    fn is_additive(&self) -> bool {
        false
    }
    fn add_noise(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        out[0] += self.params.sigma_u1 * w[0];
        out[1] += self.params.sigma_u2 * w[1];
        out[2] += self.sigma_tau(x[0]) * w[2];
    }
}

/// Six-mode barotropic channel model with topography and Newtonian
/// relaxation towards the zonal state `(x1*, 0, 0, x4*, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarotropicParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub gamma_tilde1: f64,
    pub gamma_tilde2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub wave_coupling: f64,
    pub relaxation: f64,
    pub x1_star: f64,
    pub x4_star: f64,
    pub sigma: f64,
}

impl Default for BarotropicParams {
    fn default() -> Self {
        BarotropicParams {
            alpha1: 0.86322463,
            alpha2: 0.81394451,
            beta1: 0.89887640,
            beta2: 0.48780488,
            delta1: 1.38115941,
            delta2: -0.12882575,
            gamma_tilde1: 0.19206748,
            gamma_tilde2: 0.07682699,
            gamma1: 0.05395154,
            gamma2: 0.04684573,
            wave_coupling: 1.44050611,
            relaxation: 0.1,
            x1_star: 0.95,
            x4_star: -0.76095,
            sigma: 0.01,
        }
    }
}

impl BarotropicParams {
    pub fn validate(&self) -> Result<()> {
        check(self.relaxation > 0.0, "barotropic relaxation rate must be positive")?;
        check(self.sigma > 0.0, "barotropic noise amplitude must be positive")
    }
}

#[derive(Debug, Clone)]
pub struct BarotropicModel {
    pub params: BarotropicParams,
}

impl BarotropicModel {
    pub fn new(params: BarotropicParams) -> Result<Self> {
        params.validate()?;
        Ok(BarotropicModel { params })
    }
}

impl SdeModel for BarotropicModel {
    fn dim(&self) -> usize {
        6
    }
    fn name(&self) -> &str {
        "barotropic"
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let p = &self.params;
        let c = p.relaxation;
        let (x1, x2, x3, x4, x5, x6) = (x[0], x[1], x[2], x[3], x[4], x[5]);
        let m1 = p.alpha1 * x1 - p.beta1;
        let m2 = p.alpha2 * x1 - p.beta2;
        out[0] = p.gamma_tilde1 * x3 - c * (x1 - p.x1_star);
        out[1] = -m1 * x3 - c * x2 - p.delta1 * x4 * x6;
        out[2] = m1 * x2 - p.gamma1 * x1 - c * x3 + p.delta1 * x4 * x5;
        out[3] = p.gamma_tilde2 * x6 - c * (x4 - p.x4_star) + p.wave_coupling * (x2 * x6 - x3 * x5);
        out[4] = -m2 * x6 - c * x5 - p.delta2 * x4 * x3;
        out[5] = m2 * x5 - p.gamma2 * x4 - c * x6 + p.delta2 * x4 * x2;
    }
    fn noise(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..6 {
            out[i * 7] = self.params.sigma;
        }
    }
    fn is_additive(&self) -> bool {
        true
    }
    fn add_noise(&self, _x: &[f64], w: &[f64], out: &mut [f64]) {
        for (o, wi) in out.iter_mut().zip(w) {
            *o += self.params.sigma * wi;
        }
    }
}

/// Isotropic Ornstein–Uhlenbeck process `ẋ = −rate·x + σ ξ`.
#[derive(Debug, Clone)]
pub struct OuModel {
    pub dim: usize,
    pub rate: f64,
    pub sigma: f64,
}

impl OuModel {
    /// Unit stationary variance: `ẋ = −x + √2 ξ`.
    pub fn standard(dim: usize) -> Self {
        OuModel {
            dim,
            rate: 1.0,
            sigma: std::f64::consts::SQRT_2,
        }
    }
}

impl SdeModel for OuModel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn name(&self) -> &str {
        "ou"
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -self.rate * xi;
        }
    }
    fn noise(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.dim {
            out[i * (self.dim + 1)] = self.sigma;
        }
    }
    fn is_additive(&self) -> bool {
        true
    }
    fn add_noise(&self, _x: &[f64], w: &[f64], out: &mut [f64]) {
        for (o, wi) in out.iter_mut().zip(w) {
            *o += self.sigma * wi;
        }
    }
}

/// `base` with an extra drift term; `extra(x, out)` adds its contribution
/// to `out`.
pub struct Forced<M, E> {
    pub base: M,
    pub extra: E,
}

impl<M: SdeModel, E: Fn(&[f64], &mut [f64])> SdeModel for Forced<M, E> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn noise_dim(&self) -> usize {
        self.base.noise_dim()
    }
    fn name(&self) -> &str {
        self.base.name()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.base.drift(x, out);
        (self.extra)(x, out);
    }
    fn noise(&self, x: &[f64], out: &mut [f64]) {
        self.base.noise(x, out)
    }
    fn is_additive(&self) -> bool {
        self.base.is_additive()
    }
    fn add_noise(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        self.base.add_noise(x, w, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_drift_at_origin_is_forcing() {
        let m = ScalarModel::new(ScalarParams::default()).unwrap();
        let mut f = [0.0];
        m.drift(&[0.0], &mut f);
        assert_eq!(f[0], 0.6);
    }

    #[test]
    fn scalar_score_is_log_density_derivative() {
        let m = ScalarModel::new(ScalarParams::default()).unwrap();
        for x in [-3.0, -0.5, 0.0, 1.2, 4.0] {
            let h = 1e-5;
            let fd = (m.log_density(x + h) - m.log_density(x - h)) / (2.0 * h);
            assert!((fd - m.score(x)).abs() < 1e-6);
        }
    }

    #[test]
    fn triad_origin() {
        let m = TriadModel::new(TriadParams::default()).unwrap();
        let mut f = [1.0; 3];
        m.drift(&[0.0; 3], &mut f);
        assert_eq!(f, [0.0; 3]);
        assert_eq!(m.sigma_tau(0.0), 1.5);
        let mut s = [0.0; 9];
        m.noise(&[0.3, 0.0, 0.0], &mut s);
        assert_eq!(s[8], m.sigma_tau(0.3));
        assert_eq!(s.iter().filter(|v| **v != 0.0).count(), 3);
    }

    #[test]
    fn triad_noise_bounds() {
        let m = TriadModel::new(TriadParams::default()).unwrap();
        for i in -100..=100 {
            let s = m.sigma_tau(i as f64 * 0.2);
            assert!((0.0..=3.0).contains(&s));
        }
    }

    #[test]
    fn barotropic_relaxation_vanishes_at_background() {
        let p = BarotropicParams::default();
        let m = BarotropicModel::new(p).unwrap();
        let mut f = [0.0; 6];
        m.drift(&[p.x1_star, 0.0, 0.0, p.x4_star, 0.0, 0.0], &mut f);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[3], 0.0);
    }

    #[test]
    fn diagonal_noise_matches_matrix() {
        let m = BarotropicModel::new(BarotropicParams::default()).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let w = [1.0, -2.0, 3.0, 0.5, 0.0, 1.0];
        let mut a = [0.0; 6];
        m.add_noise(&x, &w, &mut a);
        let mut s = vec![0.0; 36];
        m.noise(&x, &mut s);
        for i in 0..6 {
            assert!((a[i] - s[i * 6 + i] * w[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let bad = ScalarParams {
            c: -1.0,
            ..ScalarParams::default()
        };
        assert!(ScalarModel::new(bad).is_err());
        let bad = TriadParams {
            d_tau: 0.0,
            ..TriadParams::default()
        };
        assert!(TriadModel::new(bad).is_err());
        let bad = BarotropicParams {
            sigma: 0.0,
            ..BarotropicParams::default()
        };
        assert!(BarotropicModel::new(bad).is_err());
    }
}

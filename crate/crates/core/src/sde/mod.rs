//! Stochastic models `ẋ = F(x) + σ(x) ξ(t)` (Itô), an Euler–Maruyama
//! integrator, trajectory storage and ensembles.

mod integrate;
mod models;
mod trajectory;

pub use integrate::{ensemble_run, euler_maruyama, langevin_sample, EmConfig, EnsembleSpec, Stepper};
pub use models::{
    BarotropicModel, BarotropicParams, Forced, OuModel, ScalarModel, ScalarParams, TriadModel, TriadParams,
};
pub use trajectory::{Normalization, Trajectory};

/// A stochastic differential equation with `dim` state variables driven by
/// `noise_dim` independent white noises.
pub trait SdeModel {
    fn dim(&self) -> usize;

    fn noise_dim(&self) -> usize {
        self.dim()
    }

    fn name(&self) -> &str;

    /// Writes `F(x)` into `out`.
    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// Writes the `dim × noise_dim` noise matrix `σ(x)` (row-major).
    fn noise(&self, x: &[f64], out: &mut [f64]);

    /// True when `σ` does not depend on the state.
    fn is_additive(&self) -> bool;

    /// Adds `σ(x)·w` to `out`. Models with diagonal noise override this.
    fn add_noise(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let m = self.noise_dim();
        let mut s = vec![0.0; self.dim() * m];
        self.noise(x, &mut s);
        for (o, row) in out.iter_mut().zip(s.chunks_exact(m)) {
            *o += row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

impl<M: SdeModel + ?Sized> SdeModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn noise_dim(&self) -> usize {
        (**self).noise_dim()
    }
    fn name(&self) -> &str {
        (**self).name()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (**self).drift(x, out)
    }
    fn noise(&self, x: &[f64], out: &mut [f64]) {
        (**self).noise(x, out)
    }
    fn is_additive(&self) -> bool {
        (**self).is_additive()
    }
    fn add_noise(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        (**self).add_noise(x, w, out)
    }
}

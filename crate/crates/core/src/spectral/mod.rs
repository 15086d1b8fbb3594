//! Pseudospectral 2-D vorticity dynamics on the periodic square
//! `[0, 2π)²`:
//!
//! `∂ₜζ = ∂ₓψ ∂ᵧζ − ∂ₓζ ∂ᵧψ − A ∂ₓζ − ν_h Δ⁻²ζ − ν Δ²ζ − ν₀ ∫ζ + ς`,
//! with `ψ = Δ⁻¹ζ` and a white-in-time random-wave forcing `ς` on a ring
//! of low wavenumbers.
//!
//! Fields are stored row-major, `index = iy * n + ix` with
//! `x = 2π ix / n`, `y = 2π iy / n`.

mod fft2;

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use log::info;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use fft2::{wavenumber, Fft2};

use crate::gfdt::Perturbation;
use crate::rng;
use crate::sde::Trajectory;
use crate::stats;
use crate::{Error, Result};

/// Random-wave forcing on wavenumbers `k_min ≤ |k| ≤ k_max`: each forced
/// pair receives `amplitude · (ξ₁ cos k·x + ξ₂ sin k·x)` white noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingSpec {
    pub k_min: f64,
    pub k_max: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsParams {
    pub grid: usize,
    pub nu_h: f64,
    pub nu: f64,
    pub nu_0: f64,
    pub advection: f64,
    pub forcing: ForcingSpec,
    /// Courant number bound `(max|u| + A) dt / dx`.
    pub cfl_max: f64,
}

impl Default for NsParams {
    fn default() -> Self {
        NsParams {
            grid: 32,
            nu_h: 1e-2,
            nu: 1e-5,
            nu_0: 1.0 / (4.0 * PI * PI),
            advection: PI,
            forcing: ForcingSpec {
                k_min: 1.0,
                k_max: 2.0,
                amplitude: 0.1,
            },
            cfl_max: 1.0,
        }
    }
}

impl NsParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 || self.grid % 2 != 0 {
            return Err(Error::InvalidParameter(format!("grid side must be even and at least 4, got {}", self.grid)));
        }
        for (name, v) in [("nu_h", self.nu_h), ("nu", self.nu), ("nu_0", self.nu_0), ("forcing amplitude", self.forcing.amplitude)] {
            if !(v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.forcing.k_min <= self.forcing.k_max) {
            return Err(Error::InvalidParameter("forcing band is empty".into()));
        }
        Ok(())
    }

    pub fn unforced(&self) -> Self {
        NsParams {
            forcing: ForcingSpec {
                amplitude: 0.0,
                ..self.forcing.clone()
            },
            ..self.clone()
        }
    }
}

/// Which terms of the right-hand side are active (all by default).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub nonlinear: bool,
    pub advection: bool,
    pub dissipation: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Terms {
            nonlinear: true,
            advection: true,
            dissipation: true,
        }
    }
}

/// Integrating-factor RK4 stepper: the linear dissipation is integrated
/// exactly, the Jacobian and mean advection explicitly. The Jacobian is
/// dealiased with the 2/3 rule.
pub struct NsSolver {
    pub params: NsParams,
    pub terms: Terms,
    n: usize,
    fft: Fft2,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    dealias: Vec<bool>,
    linear: Vec<f64>,
    forced: Vec<usize>,
    cache_dt: f64,
    e_full: Vec<f64>,
    e_half: Vec<f64>,
    work: [Vec<Complex64>; 4],
    real: [Vec<f64>; 4],
}

impl NsSolver {
    pub fn new(params: NsParams) -> Result<Self> {
        Self::with_terms(params, Terms::default())
    }

    pub fn with_terms(params: NsParams, terms: Terms) -> Result<Self> {
        params.validate()?;
        let n = params.grid;
        let m = n * n;
        let mut kx = vec![0.0; m];
        let mut ky = vec![0.0; m];
        for r in 0..n {
            for c in 0..n {
                kx[r * n + c] = wavenumber(c, n);
                ky[r * n + c] = wavenumber(r, n);
            }
        }
        let k2: Vec<f64> = kx.iter().zip(&ky).map(|(a, b)| a * a + b * b).collect();
        let cutoff = n as f64 / 3.0;
        let dealias = kx.iter().zip(&ky).map(|(a, b)| a.abs() < cutoff && b.abs() < cutoff).collect();
        let linear = k2
            .iter()
            .map(|&q| {
                if !terms.dissipation {
                    0.0
                } else if q == 0.0 {
                    -params.nu_0 * 4.0 * PI * PI
                } else {
                    -params.nu_h / (q * q) - params.nu * q * q
                }
            })
            .collect();
        // one representative of each ±k pair inside the band
        let (lo, hi) = (params.forcing.k_min, params.forcing.k_max);
        let forced = (0..m)
            .filter(|&i| {
                let k = k2[i].sqrt();
                let upper = ky[i] > 0.0 || (ky[i] == 0.0 && kx[i] > 0.0);
                k > 0.0 && k >= lo - 1e-12 && k <= hi + 1e-12 && upper && kx[i].abs() < n as f64 / 2.0 && ky[i].abs() < n as f64 / 2.0
            })
            .collect();
        let zeros = vec![Complex64::default(); m];
        Ok(NsSolver {
            params,
            terms,
            n,
            fft: Fft2::new(n),
            kx,
            ky,
            k2,
            dealias,
            linear,
            forced,
            cache_dt: f64::NAN,
            e_full: vec![0.0; m],
            e_half: vec![0.0; m],
            work: [zeros.clone(), zeros.clone(), zeros.clone(), zeros],
            real: [vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]],
        })
    }

    pub fn grid(&self) -> usize {
        self.n
    }

    /// Forced wavevectors `(kx, ky)`, one per `±k` pair.
    pub fn forced_modes(&self) -> Vec<(f64, f64)> {
        self.forced.iter().map(|&i| (self.kx[i], self.ky[i])).collect()
    }

    pub fn to_spectral(&mut self, field: &[f64]) -> Vec<Complex64> {
        self.fft.forward_real(field)
    }

    /// Real field of a spectrum; returns the largest imaginary residue too.
    pub fn to_physical(&mut self, spectrum: &[Complex64], out: &mut [f64]) -> f64 {
        self.fft.inverse_real(spectrum, out)
    }

    /// `ψ̂ = −ζ̂ / |k|²` with the mean mode carried over unchanged.
    pub fn poisson_invert(&self, zeta: &[Complex64]) -> Vec<Complex64> {
        zeta.iter()
            .zip(&self.k2)
            .map(|(z, &q)| if q == 0.0 { *z } else { -z / q })
            .collect()
    }

    /// Spectral right-hand side without the linear dissipation.
    fn explicit_rhs(&mut self, zeta: &[Complex64], out: &mut [Complex64]) {
        let m = self.n * self.n;
        let i = Complex64::new(0.0, 1.0);
        out.iter_mut().for_each(|v| *v = Complex64::default());
        if self.terms.nonlinear {
            let psi = self.poisson_invert(zeta);
            let [w0, w1, w2, w3] = &mut self.work;
            for k in 0..m {
                let (ax, ay) = (i * self.kx[k], i * self.ky[k]);
                w0[k] = ax * psi[k];
                w1[k] = ay * zeta[k];
                w2[k] = ax * zeta[k];
                w3[k] = ay * psi[k];
            }
            let [r0, r1, r2, r3] = &mut self.real;
            self.fft.inverse_real(w0, r0);
            self.fft.inverse_real(w1, r1);
            self.fft.inverse_real(w2, r2);
            self.fft.inverse_real(w3, r3);
            for k in 0..m {
                r0[k] = r0[k] * r1[k] - r2[k] * r3[k];
            }
            let jac = self.fft.forward_real(r0);
            for k in 0..m {
                if self.dealias[k] {
                    out[k] = jac[k];
                }
            }
        }
        if self.terms.advection {
            let a = self.params.advection;
            for k in 0..m {
                out[k] -= a * i * self.kx[k] * zeta[k];
            }
        }
    }

    fn factors(&mut self, dt: f64) {
        if self.cache_dt != dt {
            for k in 0..self.linear.len() {
                self.e_full[k] = (self.linear[k] * dt).exp();
                self.e_half[k] = (self.linear[k] * dt * 0.5).exp();
            }
            self.cache_dt = dt;
        }
    }

    /// Deterministic part of one step (integrating-factor RK4).
    pub fn step_deterministic(&mut self, zeta: &mut [Complex64], dt: f64) {
        self.factors(dt);
        let m = zeta.len();
        let (e, e2) = (self.e_full.clone(), self.e_half.clone());
        let mut a = vec![Complex64::default(); m];
        let mut b = vec![Complex64::default(); m];
        let mut c = vec![Complex64::default(); m];
        let mut d = vec![Complex64::default(); m];
        let mut tmp = vec![Complex64::default(); m];
        self.explicit_rhs(zeta, &mut a);
        for k in 0..m {
            tmp[k] = e2[k] * (zeta[k] + 0.5 * dt * a[k]);
        }
        self.explicit_rhs(&tmp, &mut b);
        for k in 0..m {
            tmp[k] = e2[k] * zeta[k] + 0.5 * dt * b[k];
        }
        self.explicit_rhs(&tmp, &mut c);
        for k in 0..m {
            tmp[k] = e[k] * zeta[k] + dt * e2[k] * c[k];
        }
        self.explicit_rhs(&tmp, &mut d);
        for k in 0..m {
            zeta[k] = e[k] * zeta[k] + dt / 6.0 * (e[k] * a[k] + 2.0 * e2[k] * (b[k] + c[k]) + d[k]);
        }
    }

    /// Adds the forcing increment of step `step_index`, drawn from its own
    /// keyed stream so any step can be replayed.
    pub fn add_forcing(&self, zeta: &mut [Complex64], dt: f64, seed: u64, step_index: u64) {
        let amp = self.params.forcing.amplitude;
        if amp == 0.0 {
            return;
        }
        let mut r = rng::stream(seed, rng::domain::FORCING, step_index);
        let n = self.n;
        let scale = amp * dt.sqrt() * (n * n) as f64 / 2.0;
        for &k in &self.forced {
            let (x1, x2) = (rng::normal(&mut r), rng::normal(&mut r));
            let v = scale * Complex64::new(x1, -x2);
            zeta[k] += v;
            let (c, rr) = (k % n, k / n);
            let mirror = ((n - rr) % n) * n + (n - c) % n;
            zeta[mirror] += v.conj();
        }
    }

    /// Largest velocity magnitude of the field with spectrum `zeta`.
    pub fn max_velocity(&mut self, zeta: &[Complex64]) -> f64 {
        let m = zeta.len();
        let psi = self.poisson_invert(zeta);
        let i = Complex64::new(0.0, 1.0);
        let mut u: Vec<Complex64> = (0..m).map(|k| -i * self.ky[k] * psi[k]).collect();
        let mut v: Vec<Complex64> = (0..m).map(|k| i * self.kx[k] * psi[k]).collect();
        self.fft.inverse(&mut u);
        self.fft.inverse(&mut v);
        u.iter().zip(&v).map(|(a, b)| (a.re * a.re + b.re * b.re).sqrt()).fold(0.0, f64::max)
    }

    pub fn cfl_limit(&mut self, zeta: &[Complex64]) -> f64 {
        let dx = 2.0 * PI / self.n as f64;
        let speed = self.max_velocity(zeta) + if self.terms.advection { self.params.advection.abs() } else { 0.0 };
        if speed > 0.0 {
            self.params.cfl_max * dx / speed
        } else {
            f64::INFINITY
        }
    }

    /// One full step: CFL check, deterministic update, forcing.
    pub fn step(&mut self, zeta: &mut [Complex64], dt: f64, seed: u64, step_index: u64) -> Result<()> {
        let limit = self.cfl_limit(zeta);
        if dt > limit {
            return Err(Error::Cfl {
                step: step_index as usize,
                dt,
                limit,
            });
        }
        self.step_deterministic(zeta, dt);
        self.add_forcing(zeta, dt, seed, step_index);
        if zeta.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Integration {
                step: step_index as usize,
                hint: "vorticity spectrum became non-finite; reduce dt",
            });
        }
        Ok(())
    }

    /// Mean kinetic energy `½⟨|∇ψ|²⟩` of a spectrum (Parseval).
    pub fn energy(&self, zeta: &[Complex64]) -> f64 {
        let norm = ((self.n * self.n) as f64).powi(2);
        0.5 * zeta
            .iter()
            .zip(&self.k2)
            .filter(|(_, &q)| q > 0.0)
            .map(|(z, &q)| z.norm_sqr() / q)
            .sum::<f64>()
            / norm
    }

    /// Mean enstrophy `½⟨ζ²⟩`.
    pub fn enstrophy(&self, zeta: &[Complex64]) -> f64 {
        let norm = ((self.n * self.n) as f64).powi(2);
        0.5 * zeta.iter().map(|z| z.norm_sqr()).sum::<f64>() / norm
    }
}

/// Collected snapshots plus per-snapshot diagnostics.
pub struct NsRun {
    pub snapshots: Trajectory,
    pub energy: Vec<f64>,
    pub enstrophy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsRunConfig {
    pub dt: f64,
    pub burn_in_steps: usize,
    pub n_snapshots: usize,
    pub snapshot_stride: usize,
    pub seed: u64,
    /// Standard deviation of the random initial field.
    pub init_amplitude: f64,
}

/// Random initial field with independent Gaussian values at modes
/// `0 < |k| ≤ 4`, scaled to RMS `amplitude`.
pub fn random_field(n: usize, amplitude: f64, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, rng::domain::INIT, 0);
    let mut field = vec![0.0; n * n];
    for ky in -4i32..=4 {
        for kx in -4i32..=4 {
            if kx * kx + ky * ky == 0 || kx * kx + ky * ky > 16 {
                continue;
            }
            let (a, b) = (rng::normal(&mut r), rng::normal(&mut r));
            for iy in 0..n {
                for ix in 0..n {
                    let ph = 2.0 * PI * (kx as f64 * ix as f64 + ky as f64 * iy as f64) / n as f64;
                    field[iy * n + ix] += a * ph.cos() + b * ph.sin();
                }
            }
        }
    }
    let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
    if rms > 0.0 {
        field.iter_mut().for_each(|v| *v *= amplitude / rms);
    }
    field
}

/// Spins up from a random field and collects `n_snapshots` snapshots
/// `snapshot_stride` steps apart.
pub fn run_to_stationarity(params: &NsParams, config: &NsRunConfig) -> Result<NsRun> {
    if config.snapshot_stride == 0 {
        return Err(Error::InvalidParameter("snapshot stride must be at least 1".into()));
    }
    if !(config.dt > 0.0) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    let mut solver = NsSolver::new(params.clone())?;
    let n = params.grid;
    let init = random_field(n, config.init_amplitude, config.seed);
    let mut zeta = solver.to_spectral(&init);
    let mut step: u64 = 0;
    for _ in 0..config.burn_in_steps {
        solver.step(&mut zeta, config.dt, config.seed, step)?;
        step += 1;
    }
    let mut states = Vec::with_capacity(config.n_snapshots * n * n);
    let mut energy = Vec::with_capacity(config.n_snapshots);
    let mut enstrophy = Vec::with_capacity(config.n_snapshots);
    let mut field = vec![0.0; n * n];
    for s in 0..config.n_snapshots {
        for _ in 0..config.snapshot_stride {
            solver.step(&mut zeta, config.dt, config.seed, step)?;
            step += 1;
        }
        solver.to_physical(&zeta, &mut field);
        states.extend_from_slice(&field);
        energy.push(solver.energy(&zeta));
        enstrophy.push(solver.enstrophy(&zeta));
        if (s + 1) % 1000 == 0 {
            info!("vorticity snapshot {}/{}: energy {:.4e}", s + 1, config.n_snapshots, energy[s]);
        }
    }
    Ok(NsRun {
        snapshots: Trajectory::new(n * n, config.dt, config.snapshot_stride, states)?,
        energy,
        enstrophy,
    })
}

/// Difference of the means of the two halves of `series` and its combined
/// block standard error.
pub fn half_difference(series: &[f64]) -> (f64, f64) {
    let half = series.len() / 2;
    let (a, b) = (&series[..half], &series[half..2 * half]);
    let tau = stats::decorrelation_lag(series, (-1.0f64).exp(), series.len() / 10);
    let block = stats::block_length(half, tau, 10);
    let (ma, sa) = stats::block_mean_se(a, block);
    let (mb, sb) = stats::block_mean_se(b, block);
    (mb - ma, (sa * sa + sb * sb).sqrt())
}

/// State-independent forcing of one pixel.
pub fn pixel_perturbation(grid: usize, ix: usize, iy: usize, amplitude: f64) -> Result<Perturbation> {
    if ix >= grid || iy >= grid {
        return Err(Error::InvalidParameter(format!("pixel ({ix}, {iy}) outside a {grid}×{grid} grid")));
    }
    let mut u = vec![0.0; grid * grid];
    u[iy * grid + ix] = amplitude;
    Ok(Perturbation::constant(u))
}

/// Cyclic shift `out(ix, iy) = field(ix − sx, iy − sy)`.
pub fn shift(field: &[f64], grid: usize, sx: usize, sy: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for iy in 0..grid {
        for ix in 0..grid {
            out[((iy + sy) % grid) * grid + (ix + sx) % grid] = field[iy * grid + ix];
        }
    }
    out
}

/// Reflection `ζ(x, y) → −ζ(x, −y)`, a symmetry of the dynamics.
pub fn reflect(field: &[f64], grid: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for iy in 0..grid {
        for ix in 0..grid {
            out[((grid - iy) % grid) * grid + ix] = -field[iy * grid + ix];
        }
    }
    out
}

/// Parameters and run settings stored next to a snapshot file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub params: NsParams,
    pub run: NsRunConfig,
    pub layout: String,
    pub forced_modes: Vec<(f64, f64)>,
}

pub fn write_snapshots(dir: &Path, params: &NsParams, config: &NsRunConfig, run: &NsRun) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.snapshots.write_binary(&dir.join("snapshots.bin"))?;
    let solver = NsSolver::new(params.clone())?;
    let manifest = SnapshotManifest {
        params: params.clone(),
        run: config.clone(),
        layout: "row-major, index = iy * grid + ix".into(),
        forced_modes: solver.forced_modes(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("snapshots.json"))?), &manifest)?;
    Ok(())
}

pub fn read_snapshots(dir: &Path) -> Result<(SnapshotManifest, Trajectory)> {
    let manifest: SnapshotManifest = serde_json::from_reader(File::open(dir.join("snapshots.json"))?)?;
    let traj = Trajectory::read_binary(&dir.join("snapshots.bin"))?;
    if traj.dim() != manifest.params.grid * manifest.params.grid {
        return Err(Error::GridMismatch(format!(
            "snapshots have dimension {} but the manifest grid is {}",
            traj.dim(),
            manifest.params.grid
        )));
    }
    Ok((manifest, traj))
}

#[cfg(test)]
mod tests;

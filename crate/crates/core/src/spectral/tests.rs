use super::*;

const N: usize = 32;

fn grid_field(f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let h = 2.0 * PI / N as f64;
    let mut out = vec![0.0; N * N];
    for iy in 0..N {
        for ix in 0..N {
            out[iy * N + ix] = f(ix as f64 * h, iy as f64 * h);
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn physical(s: &mut NsSolver, z: &[Complex64]) -> Vec<f64> {
    let mut out = vec![0.0; N * N];
    s.to_physical(z, &mut out);
    out
}

fn only(terms: (bool, bool, bool)) -> NsSolver {
    NsSolver::with_terms(
        NsParams::default().unforced(),
        Terms {
            nonlinear: terms.0,
            advection: terms.1,
            dissipation: terms.2,
        },
    )
    .unwrap()
}

#[test]
fn poisson_eigenfunctions() {
    let mut s = NsSolver::new(NsParams::default()).unwrap();
    for (k, scale) in [(1.0, -1.0), (2.0, -0.25)] {
        let z = s.to_spectral(&grid_field(|x, _| (k * x).cos()));
        let psi = s.poisson_invert(&z);
        let got = physical(&mut s, &psi);
        let want = grid_field(|x, _| scale * (k * x).cos());
        assert!(max_diff(&got, &want) < 1e-13);
    }
    let z = s.to_spectral(&vec![0.0; N * N]);
    assert!(s.poisson_invert(&z).iter().all(|v| v.norm() == 0.0));
    // the mean is carried over
    let z = s.to_spectral(&vec![0.7; N * N]);
    let inv = s.poisson_invert(&z);
    let psi = physical(&mut s, &inv);
    assert!(psi.iter().all(|v| (v - 0.7).abs() < 1e-14));
}

#[test]
fn zero_is_a_fixed_point() {
    let mut s = NsSolver::new(NsParams::default().unforced()).unwrap();
    let mut z = s.to_spectral(&vec![0.0; N * N]);
    for k in 0..10 {
        s.step(&mut z, 0.01, 1, k).unwrap();
    }
    assert!(z.iter().all(|v| v.norm() == 0.0));
}

#[test]
fn mean_advection_translates() {
    let mut s = only((false, true, false));
    let dt = 1e-3;
    let mut z = s.to_spectral(&grid_field(|x, _| x.cos()));
    s.step(&mut z, dt, 0, 0).unwrap();
    let want = grid_field(|x, _| (x - PI * dt).cos());
    assert!(max_diff(&physical(&mut s, &z), &want) < 1e-6);
}

#[test]
fn single_mode_dissipation() {
    let dt = 1e-3;
    let mut s = only((true, false, true));
    // the mean decays at ν₀(2π)² = 1
    let mut z = s.to_spectral(&vec![0.5; N * N]);
    s.step(&mut z, dt, 0, 0).unwrap();
    let got = physical(&mut s, &z);
    assert!(got.iter().all(|v| (v - 0.5 * (-dt).exp()).abs() < 1e-6));
    // a single Fourier mode has zero Jacobian and decays at its own rate
    let k2: f64 = 9.0 + 4.0;
    let rate = -1e-2 / (k2 * k2) - 1e-5 * k2 * k2;
    let mut z = s.to_spectral(&grid_field(|x, y| (3.0 * x + 2.0 * y).sin()));
    for k in 0..100 {
        s.step(&mut z, dt, 0, k).unwrap();
    }
    let want = grid_field(|x, y| (rate * 100.0 * dt).exp() * (3.0 * x + 2.0 * y).sin());
    assert!(max_diff(&physical(&mut s, &z), &want) < 1e-12);
}

#[test]
fn spectrum_stays_hermitian() {
    let mut s = NsSolver::new(NsParams::default()).unwrap();
    let mut z = s.to_spectral(&random_field(N, 1.0, 3));
    let mut out = vec![0.0; N * N];
    for k in 0..50 {
        s.step(&mut z, 0.01, 9, k).unwrap();
        let imag = s.to_physical(&z, &mut out);
        let scale = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(imag <= 1e-12 * scale, "step {k}: {imag}");
    }
}

fn deterministic_step(field: &[f64]) -> Vec<f64> {
    let mut s = NsSolver::new(NsParams::default().unforced()).unwrap();
    let mut z = s.to_spectral(field);
    for k in 0..5 {
        s.step(&mut z, 0.01, 0, k).unwrap();
    }
    physical(&mut s, &z)
}

#[test]
fn step_commutes_with_shifts() {
    let f = random_field(N, 2.0, 4);
    let a = deterministic_step(&shift(&f, N, 5, 11));
    let b = shift(&deterministic_step(&f), N, 5, 11);
    assert!(max_diff(&a, &b) < 1e-12);
}

#[test]
fn step_commutes_with_reflection() {
    let f = random_field(N, 2.0, 5);
    let a = deterministic_step(&reflect(&f, N));
    let b = reflect(&deterministic_step(&f), N);
    assert!(max_diff(&a, &b) < 1e-12);
}

#[test]
fn jacobian_is_dealiased() {
    let mut s = only((true, false, false));
    // k₁ + k₂ = (11, 3) lies beyond the 2/3 cutoff, k₁ − k₂ = (1, −1) inside
    let field = grid_field(|x, y| (6.0 * x + y).cos() + (5.0 * x + 2.0 * y).cos());
    let z = s.to_spectral(&field);
    let mut out = vec![Complex64::default(); N * N];
    s.explicit_rhs(&z, &mut out);
    let peak = out.iter().map(|v| v.norm()).fold(0.0, f64::max);
    assert!(peak > 1.0);
    for (k, v) in out.iter().enumerate() {
        let (kx, ky) = (wavenumber(k % N, N), wavenumber(k / N, N));
        let allowed = (kx, ky) == (1.0, -1.0) || (kx, ky) == (-1.0, 1.0);
        if !allowed {
            assert!(v.norm() < 1e-10 * peak, "mode ({kx}, {ky}) = {v}");
        }
    }
}

#[test]
fn unforced_energy_decays() {
    let params = NsParams::default().unforced();
    let cfg = NsRunConfig {
        dt: 0.01,
        burn_in_steps: 0,
        n_snapshots: 100,
        snapshot_stride: 5,
        seed: 2,
        init_amplitude: 1.0,
    };
    let run = run_to_stationarity(&params, &cfg).unwrap();
    assert!(run.energy.windows(2).all(|w| w[1] <= w[0]));
    let bad = NsRunConfig {
        snapshot_stride: 0,
        ..cfg
    };
    assert!(run_to_stationarity(&params, &bad).is_err());
}

#[test]
fn cfl_violation_is_reported() {
    let mut s = NsSolver::new(NsParams::default()).unwrap();
    let mut z = s.to_spectral(&random_field(N, 5.0, 1));
    assert!(matches!(s.step(&mut z, 1.0, 0, 0), Err(Error::Cfl { .. })));
}

#[test]
fn pixel_perturbations() {
    let zero = pixel_perturbation(N, 3, 4, 0.0).unwrap();
    assert!(zero.offset.iter().all(|v| *v == 0.0));
    let a = pixel_perturbation(N, 3, 4, 1.0).unwrap();
    let b = pixel_perturbation(N, 7, 0, 2.0).unwrap();
    let sum: Vec<f64> = a.offset.iter().zip(&b.offset).map(|(x, y)| x + y).collect();
    assert_eq!(sum[4 * N + 3], 1.0);
    assert_eq!(sum[7], 2.0);
    assert_eq!(sum.iter().filter(|v| **v != 0.0).count(), 2);
    assert_eq!(a.divergence, 0.0);
    let origin = pixel_perturbation(N, 0, 0, 1.0).unwrap();
    assert_eq!(shift(&origin.offset, N, 3, 4), a.offset);
    assert!(pixel_perturbation(N, N, 0, 1.0).is_err());
}

#[test]
fn snapshot_round_trip() {
    let params = NsParams::default();
    let cfg = NsRunConfig {
        dt: 0.01,
        burn_in_steps: 10,
        n_snapshots: 4,
        snapshot_stride: 2,
        seed: 8,
        init_amplitude: 1.0,
    };
    let run = run_to_stationarity(&params, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_snapshots(dir.path(), &params, &cfg, &run).unwrap();
    let (m, t) = read_snapshots(dir.path()).unwrap();
    assert_eq!(m.params, params);
    assert_eq!(t.states(), run.snapshots.states());
    assert_eq!(m.forced_modes.len(), 6);
}

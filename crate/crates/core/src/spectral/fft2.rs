use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Square 2-D FFT on an `n × n` row-major grid (`index = row * n + col`,
/// rows along `y`, columns along `x`). The forward transform is
/// unnormalized; the inverse divides by `n²`.
pub struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    column: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch_len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
        Fft2 {
            n,
            forward,
            inverse,
            column: vec![Complex64::default(); n],
            scratch: vec![Complex64::default(); scratch_len],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn transform(&mut self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inverse } else { &self.forward };
        for row in data.chunks_exact_mut(n) {
            plan.process_with_scratch(row, &mut self.scratch);
        }
        for c in 0..n {
            for r in 0..n {
                self.column[r] = data[r * n + c];
            }
            plan.process_with_scratch(&mut self.column, &mut self.scratch);
            for r in 0..n {
                data[r * n + c] = self.column[r];
            }
        }
    }

    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.transform(data, true);
        let s = 1.0 / (self.n * self.n) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn forward_real(&mut self, field: &[f64]) -> Vec<Complex64> {
        let mut d: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut d);
        d
    }

    /// Inverse transform keeping the real part; returns the largest
    /// imaginary magnitude alongside.
    pub fn inverse_real(&mut self, spectrum: &[Complex64], out: &mut [f64]) -> f64 {
        let mut d = spectrum.to_vec();
        self.inverse(&mut d);
        let mut imag = 0.0f64;
        for (o, v) in out.iter_mut().zip(&d) {
            *o = v.re;
            imag = imag.max(v.im.abs());
        }
        imag
    }
}

/// Signed integer wavenumber of FFT bin `i` on an `n`-point grid.
pub fn wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

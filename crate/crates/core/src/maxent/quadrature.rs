//! Globally adaptive Gauss–Kronrod (7/15) quadrature for vector-valued
//! integrands.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd Kronrod nodes 1, 3, 5, 7
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_PANELS: usize = 2000;

/// Integrates each component of `f` over `[a, b]`. Panels are bisected
/// worst-first until every component's error estimate is below
/// `tol · max(1, |integral|)` or the panel budget is spent.
pub fn integrate<F: FnMut(f64, &mut [f64])>(mut f: F, a: f64, b: f64, dim: usize, tol: f64) -> Vec<f64> {
    let mut buf = vec![0.0; dim];
    // a few initial panels keep narrow peaks from slipping between nodes
    let initial = 16;
    let h = (b - a) / initial as f64;
    let mut panels: Vec<Panel> = (0..initial)
        .map(|p| {
            let lo = a + p as f64 * h;
            Panel::new(&mut f, lo, lo + h, &mut buf)
        })
        .collect();
    let mut total = vec![0.0; dim];
    let mut err = vec![0.0; dim];
    for p in &panels {
        p.add_to(&mut total, &mut err, 1.0);
    }
    loop {
        let done = err.iter().zip(&total).all(|(e, t)| *e <= tol * t.abs().max(1.0) || !e.is_finite());
        if done || panels.len() >= MAX_PANELS {
            return total;
        }
        // bisect the panel with the largest scaled error
        let scale: Vec<f64> = total.iter().map(|t| 1.0 / t.abs().max(1.0)).collect();
        let worst = (0..panels.len())
            .max_by(|&i, &j| panels[i].score(&scale).total_cmp(&panels[j].score(&scale)))
            .unwrap();
        let p = panels.swap_remove(worst);
        p.add_to(&mut total, &mut err, -1.0);
        let c = 0.5 * (p.a + p.b);
        for (lo, hi) in [(p.a, c), (c, p.b)] {
            let q = Panel::new(&mut f, lo, hi, &mut buf);
            q.add_to(&mut total, &mut err, 1.0);
            panels.push(q);
        }
        // running sums drift; refresh them now and then
        if panels.len() % 256 == 0 {
            total.iter_mut().for_each(|v| *v = 0.0);
            err.iter_mut().for_each(|v| *v = 0.0);
            for p in &panels {
                p.add_to(&mut total, &mut err, 1.0);
            }
        }
    }
}

struct Panel {
    a: f64,
    b: f64,
    value: Vec<f64>,
    error: Vec<f64>,
}

impl Panel {
    fn new<F: FnMut(f64, &mut [f64])>(f: &mut F, a: f64, b: f64, val: &mut [f64]) -> Self {
        let dim = val.len();
        let c = 0.5 * (a + b);
        let hw = 0.5 * (b - a);
        let mut kronrod = vec![0.0; dim];
        let mut gauss = vec![0.0; dim];
        for (i, (&x, &wk)) in XGK.iter().zip(&WGK).enumerate() {
            let pts: &[f64] = if x == 0.0 { &[0.0] } else { &[-1.0, 1.0] };
            for &sgn in pts {
                f(c + sgn * x * hw, val);
                for (k, v) in val.iter().enumerate() {
                    kronrod[k] += wk * v;
                    if i % 2 == 1 {
                        gauss[k] += WG[i / 2] * v;
                    }
                }
            }
        }
        let error = kronrod.iter().zip(&gauss).map(|(k, g)| (hw * (k - g)).abs()).collect();
        Panel {
            a,
            b,
            value: kronrod.iter().map(|k| hw * k).collect(),
            error,
        }
    }

    fn add_to(&self, total: &mut [f64], err: &mut [f64], sign: f64) {
        for k in 0..total.len() {
            total[k] += sign * self.value[k];
            err[k] += sign * self.error[k];
        }
    }

    fn score(&self, scale: &[f64]) -> f64 {
        self.error.iter().zip(scale).map(|(e, s)| e * s).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        // ∫₀¹ xᵏ dx = 1/(k+1)
        let r = integrate(|x, o| (0..10).for_each(|k| o[k] = x.powi(k as i32)), 0.0, 1.0, 10, 1e-12);
        for (k, v) in r.iter().enumerate() {
            assert!((v - 1.0 / (k + 1) as f64).abs() < 1e-13);
        }
    }

    #[test]
    fn narrow_gaussian() {
        let s = 0.01f64;
        let r = integrate(|x, o| o[0] = (-0.5 * (x - 0.3) * (x - 0.3) / (s * s)).exp(), -10.0, 10.0, 1, 1e-12);
        let want = s * (2.0 * std::f64::consts::PI).sqrt();
        assert!((r[0] - want).abs() < 1e-11);
    }
}

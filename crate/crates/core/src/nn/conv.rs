use serde::{Deserialize, Serialize};

use super::{init_uniform, Activation, Network, NetworkParams};
use crate::rng;
use crate::{Error, Result};

const K: usize = 3;

/// 3×3 convolution with periodic padding. `input` is `cin × h × w`,
/// `weight` is `cout × cin × 3 × 3`; the output is
/// `cout × (h / stride) × (w / stride)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    stride: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / stride, w / stride);
    let cols = column_table(w, ow, stride);
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let out_c = &mut out[co * oh * ow..(co + 1) * oh * ow];
        out_c.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let in_c = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let wv = weight[((co * cin + ci) * K + ky) * K + kx];
                    let col = &cols[kx];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky + h - 1) % h;
                        let in_row = &in_c[iy * w..(iy + 1) * w];
                        let out_row = &mut out_c[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            axpy_shifted(out_row, in_row, wv, kx);
                        } else {
                            for (o, &ix) in out_row.iter_mut().zip(col) {
                                *o += wv * in_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d_forward`]: accumulates into `grad_weight`,
/// `grad_bias` and, when given, `grad_input`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    stride: usize,
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    let (oh, ow) = (h / stride, w / stride);
    let cols = column_table(w, ow, stride);
    for co in 0..cout {
        let g_c = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        grad_bias[co] += g_c.iter().sum::<f64>();
        for ci in 0..cin {
            let in_c = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let widx = ((co * cin + ci) * K + ky) * K + kx;
                    let wv = weight[widx];
                    let col = &cols[kx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky + h - 1) % h;
                        let g_row = &g_c[oy * ow..(oy + 1) * ow];
                        let in_row = &in_c[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            acc += dot_shifted(g_row, in_row, kx);
                        } else {
                            for (g, &ix) in g_row.iter().zip(col) {
                                acc += g * in_row[ix];
                            }
                        }
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let gi_row = &mut gi[ci * h * w + iy * w..ci * h * w + (iy + 1) * w];
                            if stride == 1 {
                                scatter_shifted(gi_row, g_row, wv, kx);
                            } else {
                                for (g, &ix) in g_row.iter().zip(col) {
                                    gi_row[ix] += wv * g;
                                }
                            }
                        }
                    }
                    grad_weight[widx] += acc;
                }
            }
        }
    }
}

// Stride-1 rows: output column `x` reads input column `(x + kx − 1) mod w`.
// Each case splits into contiguous slices so the loops vectorize.

#[inline]
fn axpy(out: &mut [f64], x: &[f64], a: f64) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy_shifted(out: &mut [f64], input: &[f64], a: f64, kx: usize) {
    let w = out.len();
    match kx {
        0 => {
            out[0] += a * input[w - 1];
            axpy(&mut out[1..], &input[..w - 1], a);
        }
        1 => axpy(out, input, a),
        _ => {
            axpy(&mut out[..w - 1], &input[1..], a);
            out[w - 1] += a * input[0];
        }
    }
}

#[inline]
fn dot_shifted(g: &[f64], input: &[f64], kx: usize) -> f64 {
    let w = g.len();
    match kx {
        0 => g[0] * input[w - 1] + dot(&g[1..], &input[..w - 1]),
        1 => dot(g, input),
        _ => dot(&g[..w - 1], &input[1..]) + g[w - 1] * input[0],
    }
}

#[inline]
fn scatter_shifted(grad_in: &mut [f64], g: &[f64], a: f64, kx: usize) {
    let w = g.len();
    match kx {
        0 => {
            grad_in[w - 1] += a * g[0];
            axpy(&mut grad_in[..w - 1], &g[1..], a);
        }
        1 => axpy(grad_in, g, a),
        _ => {
            axpy(&mut grad_in[1..], &g[..w - 1], a);
            grad_in[0] += a * g[w - 1];
        }
    }
}

fn column_table(w: usize, ow: usize, stride: usize) -> [Vec<usize>; K] {
    std::array::from_fn(|kx| (0..ow).map(|ox| (ox * stride + kx + w - 1) % w).collect())
}

/// Nearest-neighbour ×2 upsampling of a `c × h × w` tensor.
pub fn upsample_forward(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out[(ch * h2 + y) * w2 + x] = input[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut g = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                g[(ch * h + y / 2) * w + x / 2] += grad_out[(ch * h2 + y) * w2 + x];
            }
        }
    }
    g
}

/// Encoder–decoder shape on a periodic square grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetworkSpec {
    pub grid_size: usize,
    pub base_channels: usize,
    pub down_levels: usize,
    pub residual_blocks: usize,
    pub seed: u64,
}

impl ConvNetworkSpec {
    /// Lifting to 32 channels, three downsamplings, eight residual blocks.
    pub fn full_scale(grid_size: usize, seed: u64) -> Self {
        ConvNetworkSpec {
            grid_size,
            base_channels: 32,
            down_levels: 3,
            residual_blocks: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.base_channels == 0 {
            return Err(Error::InvalidParameter("grid size and base channels must be positive".into()));
        }
        if self.grid_size % (1 << self.down_levels) != 0 {
            return Err(Error::InvalidParameter(format!(
                "grid size {} not divisible by 2^{}",
                self.grid_size, self.down_levels
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(cin, cout, stride)` of every convolution in parameter order.
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let l_max = self.down_levels;
        let mut v = vec![(1, self.channels(0), 1)];
        for l in 1..=l_max {
            v.push((self.channels(l - 1), self.channels(l), 2));
        }
        for _ in 0..2 * self.residual_blocks {
            v.push((self.channels(l_max), self.channels(l_max), 1));
        }
        for l in (1..=l_max).rev() {
            v.push((self.channels(l), self.channels(l - 1), 1));
            v.push((2 * self.channels(l - 1), self.channels(l - 1), 1));
        }
        v.push((self.channels(0), 1, 1));
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(ci, co, _)| co * ci * K * K + co).sum()
    }
}

/// U-shaped network: lifting conv, strided downsampling convs, residual
/// blocks at the bottleneck, upsampling with skip concatenation, and a
/// single-channel projection. Hidden activations are Swish; no
/// normalization layers.
#[derive(Debug, Clone)]
pub struct UNet {
    spec: ConvNetworkSpec,
    layers: Vec<(usize, usize, usize)>,
    offsets: Vec<usize>,
}

pub struct UNetCache {
    input: Vec<f64>,
    lift_pre: Vec<f64>,
    /// Activated encoder outputs per level.
    enc: Vec<Vec<f64>>,
    down_pre: Vec<Vec<f64>>,
    /// `(block input, first conv pre-activation, first activation)`.
    res: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    /// `(upsampled, up pre-activation, concatenated, merge pre-activation)`
    /// in decoding order.
    dec: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
    proj_in: Vec<f64>,
}

const SWISH: Activation = Activation::Swish;

fn swish(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| SWISH.apply(x)).collect()
}

fn swish_back(grad: &mut [f64], pre: &[f64]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        *g *= SWISH.derivative(z);
    }
}

impl UNet {
    pub fn new(spec: ConvNetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for &(ci, co, _) in &layers {
            offsets.push(off);
            off += co * ci * K * K + co;
        }
        Ok(UNet { spec, layers, offsets })
    }

    pub fn spec(&self) -> &ConvNetworkSpec {
        &self.spec
    }

    fn side(&self, level: usize) -> usize {
        self.spec.grid_size >> level
    }

    fn conv(&self, idx: usize, params: &[f64], input: &[f64], side: usize) -> Vec<f64> {
        let (ci, co, s) = self.layers[idx];
        let off = self.offsets[idx];
        let nw = co * ci * K * K;
        conv2d_forward(input, ci, side, side, &params[off..off + nw], &params[off + nw..off + nw + co], co, s)
    }

    fn conv_back(&self, idx: usize, params: &[f64], input: &[f64], side: usize, g_out: &[f64], grad: &mut [f64], need_input: bool) -> Option<Vec<f64>> {
        let (ci, co, s) = self.layers[idx];
        let off = self.offsets[idx];
        let nw = co * ci * K * K;
        let (gw, gb) = grad[off..off + nw + co].split_at_mut(nw);
        let mut gi = if need_input { Some(vec![0.0; ci * side * side]) } else { None };
        conv2d_backward(input, ci, side, side, &params[off..off + nw], co, s, g_out, gw, gb, gi.as_deref_mut());
        gi
    }
}

impl Network for UNet {
    type Cache = UNetCache;

    fn input_len(&self) -> usize {
        self.spec.grid_size * self.spec.grid_size
    }

    fn output_len(&self) -> usize {
        self.input_len()
    }

    fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    fn init_params(&self) -> NetworkParams {
        let mut values = vec![0.0; self.param_count()];
        let mut r = rng::stream(self.spec.seed, rng::domain::INIT, 1);
        for (&(ci, co, _), &off) in self.layers.iter().zip(&self.offsets) {
            init_uniform(&mut r, &mut values[off..off + co * ci * K * K], ci * K * K, co * K * K);
        }
        NetworkParams::new(values)
    }

    fn forward_cached(&self, params: &[f64], input: &[f64]) -> (Vec<f64>, UNetCache) {
        let lmax = self.spec.down_levels;
        let lift_pre = self.conv(0, params, input, self.side(0));
        let mut enc = vec![swish(&lift_pre)];
        let mut down_pre = Vec::with_capacity(lmax);
        for l in 1..=lmax {
            let pre = self.conv(l, params, &enc[l - 1], self.side(l - 1));
            enc.push(swish(&pre));
            down_pre.push(pre);
        }
        let mut idx = lmax + 1;
        let mut r = enc[lmax].clone();
        let mut res = Vec::with_capacity(self.spec.residual_blocks);
        for _ in 0..self.spec.residual_blocks {
            let p1 = self.conv(idx, params, &r, self.side(lmax));
            let a1 = swish(&p1);
            let p2 = self.conv(idx + 1, params, &a1, self.side(lmax));
            let out: Vec<f64> = r.iter().zip(&p2).map(|(a, b)| a + b).collect();
            res.push((std::mem::replace(&mut r, out), p1, a1));
            idx += 2;
        }
        let mut u = r;
        let mut dec = Vec::with_capacity(lmax);
        for l in (1..=lmax).rev() {
            let up = upsample_forward(&u, self.spec.channels(l), self.side(l), self.side(l));
            let upre = self.conv(idx, params, &up, self.side(l - 1));
            let mut cat = swish(&upre);
            cat.extend_from_slice(&enc[l - 1]);
            let mpre = self.conv(idx + 1, params, &cat, self.side(l - 1));
            u = swish(&mpre);
            dec.push((up, upre, cat, mpre));
            idx += 2;
        }
        let out = self.conv(idx, params, &u, self.side(0));
        let cache = UNetCache {
            input: input.to_vec(),
            lift_pre,
            enc,
            down_pre,
            res,
            dec,
            proj_in: u,
        };
        (out, cache)
    }

    fn backward(&self, params: &[f64], c: &UNetCache, grad_output: &[f64], grad: &mut [f64]) {
        let lmax = self.spec.down_levels;
        let n_layers = self.layers.len();
        let mut g_enc: Vec<Vec<f64>> = c.enc.iter().map(|e| vec![0.0; e.len()]).collect();

        let mut idx = n_layers - 1;
        let mut g_u = self.conv_back(idx, params, &c.proj_in, self.side(0), grad_output, grad, true).unwrap();

        for step in (0..lmax).rev() {
            let l = lmax - step;
            let (up, upre, cat, mpre) = &c.dec[step];
            let ch = self.spec.channels(l - 1);
            let side = self.side(l - 1);
            swish_back(&mut g_u, mpre);
            idx -= 1;
            let g_cat = self.conv_back(idx, params, cat, side, &g_u, grad, true).unwrap();
            let (g_ua, g_skip) = g_cat.split_at(ch * side * side);
            for (a, b) in g_enc[l - 1].iter_mut().zip(g_skip) {
                *a += b;
            }
            let mut g_upre = g_ua.to_vec();
            swish_back(&mut g_upre, upre);
            idx -= 1;
            let g_up = self.conv_back(idx, params, up, side, &g_upre, grad, true).unwrap();
            g_u = upsample_backward(&g_up, self.spec.channels(l), self.side(l), self.side(l));
        }

        let side = self.side(lmax);
        for (r_in, p1, a1) in c.res.iter().rev() {
            idx -= 1;
            let mut g_a1 = self.conv_back(idx, params, a1, side, &g_u, grad, true).unwrap();
            swish_back(&mut g_a1, p1);
            idx -= 1;
            let g_rin = self.conv_back(idx, params, r_in, side, &g_a1, grad, true).unwrap();
            for (a, b) in g_u.iter_mut().zip(&g_rin) {
                *a += b;
            }
        }
        for (a, b) in g_enc[lmax].iter_mut().zip(&g_u) {
            *a += b;
        }

        for l in (1..=lmax).rev() {
            let mut g = std::mem::take(&mut g_enc[l]);
            swish_back(&mut g, &c.down_pre[l - 1]);
            idx -= 1;
            debug_assert_eq!(idx, l);
            let gi = self.conv_back(idx, params, &c.enc[l - 1], self.side(l - 1), &g, grad, true).unwrap();
            for (a, b) in g_enc[l - 1].iter_mut().zip(&gi) {
                *a += b;
            }
        }
        let mut g0 = std::mem::take(&mut g_enc[0]);
        swish_back(&mut g0, &c.lift_pre);
        self.conv_back(0, params, &c.input, self.side(0), &g0, grad, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{finite_difference, rel_err, Probe};
    use crate::nn::{gradient, Loss};
    use rand::Rng;

    fn shift(x: &[f64], c: usize, n: usize, dy: usize, dx: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            for y in 0..n {
                for xx in 0..n {
                    out[(ch * n + (y + dy) % n) * n + (xx + dx) % n] = x[(ch * n + y) * n + xx];
                }
            }
        }
        out
    }

    fn random(r: &mut rng::Stream, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    /// Single convolution layer wrapped as a network for gradient checks.
    struct ConvLayer {
        cin: usize,
        cout: usize,
        n: usize,
        stride: usize,
    }

    impl Network for ConvLayer {
        type Cache = Vec<f64>;
        fn input_len(&self) -> usize {
            self.cin * self.n * self.n
        }
        fn output_len(&self) -> usize {
            self.cout * (self.n / self.stride).pow(2)
        }
        fn param_count(&self) -> usize {
            self.cout * self.cin * 9 + self.cout
        }
        fn init_params(&self) -> NetworkParams {
            NetworkParams::zeros(self.param_count())
        }
        fn forward_cached(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
            let nw = self.cout * self.cin * 9;
            let y = conv2d_forward(x, self.cin, self.n, self.n, &p[..nw], &p[nw..], self.cout, self.stride);
            (y, x.to_vec())
        }
        fn backward(&self, p: &[f64], x: &Vec<f64>, g: &[f64], grad: &mut [f64]) {
            let nw = self.cout * self.cin * 9;
            let (gw, gb) = grad.split_at_mut(nw);
            conv2d_backward(x, self.cin, self.n, self.n, &p[..nw], self.cout, self.stride, g, gw, gb, None);
        }
    }

    #[test]
    fn conv_layer_gradients() {
        let mut r = rng::stream(5, 0, 0);
        for case in 0..20 {
            let layer = ConvLayer {
                cin: r.gen_range(1..3),
                cout: r.gen_range(1..3),
                n: 4,
                stride: if case % 2 == 0 { 1 } else { 2 },
            };
            let p = random(&mut r, layer.param_count());
            let x = random(&mut r, layer.input_len());
            let probe = Probe(random(&mut r, layer.output_len()));
            let (_, g) = gradient(&layer, &p, &[&x], &probe).unwrap();
            let fd = finite_difference(&layer, &p, &[&x], &probe, 1e-5);
            assert!(rel_err(&g, &fd) < 1e-4);
        }
    }

    struct InputProbe(Vec<f64>);
    impl Loss for InputProbe {
        fn output_term(&self, _: usize, o: &[f64], g: &mut [f64]) -> f64 {
            g.copy_from_slice(&self.0);
            o.iter().zip(&self.0).map(|(a, b)| a * b).sum()
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut r = rng::stream(6, 0, 0);
        let (cin, cout, n) = (2, 3, 4);
        let w = random(&mut r, cout * cin * 9);
        let b = random(&mut r, cout);
        let x = random(&mut r, cin * n * n);
        for stride in [1, 2] {
            let on = n / stride;
            let probe = InputProbe(random(&mut r, cout * on * on));
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; cout];
            let mut gi = vec![0.0; x.len()];
            conv2d_backward(&x, cin, n, n, &w, cout, stride, &probe.0, &mut gw, &mut gb, Some(&mut gi));
            let f = |x: &[f64]| -> f64 {
                conv2d_forward(x, cin, n, n, &w, &b, cout, stride).iter().zip(&probe.0).map(|(a, b)| a * b).sum()
            };
            let mut xp = x.clone();
            for i in 0..x.len() {
                xp[i] = x[i] + 1e-5;
                let fp = f(&xp);
                xp[i] = x[i] - 1e-5;
                let fm = f(&xp);
                xp[i] = x[i];
                assert!((gi[i] - (fp - fm) / 2e-5).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn unet_gradients() {
        let mut r = rng::stream(8, 0, 0);
        for case in 0..20u64 {
            let spec = ConvNetworkSpec {
                grid_size: 4,
                base_channels: r.gen_range(1..3),
                down_levels: r.gen_range(0..3),
                residual_blocks: r.gen_range(0..2),
                seed: case,
            };
            let net = UNet::new(spec).unwrap();
            let p = net.init_params().values;
            let x = random(&mut r, net.input_len());
            let probe = Probe(random(&mut r, net.output_len()));
            let (_, g) = gradient(&net, &p, &[&x], &probe).unwrap();
            let fd = finite_difference(&net, &p, &[&x], &probe, 1e-5);
            let e = rel_err(&g, &fd);
            assert!(e < 1e-4, "case {case}: {e}");
        }
    }

    #[test]
    fn periodic_conv_commutes_with_shifts() {
        let mut r = rng::stream(9, 0, 0);
        let (cin, cout, n) = (2, 3, 8);
        let w = random(&mut r, cout * cin * 9);
        let b = random(&mut r, cout);
        let x = random(&mut r, cin * n * n);
        let y = conv2d_forward(&x, cin, n, n, &w, &b, cout, 1);
        let ys = conv2d_forward(&shift(&x, cin, n, 3, 5), cin, n, n, &w, &b, cout, 1);
        let sy = shift(&y, cout, n, 3, 5);
        for (a, b) in ys.iter().zip(&sy) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unet_commutes_with_coarse_shifts() {
        let spec = ConvNetworkSpec {
            grid_size: 8,
            base_channels: 2,
            down_levels: 2,
            residual_blocks: 1,
            seed: 3,
        };
        let net = UNet::new(spec).unwrap();
        let p = net.init_params().values;
        let x = random(&mut rng::stream(10, 0, 0), 64);
        let y = net.forward(&p, &x).unwrap();
        // shifts by multiples of 2^levels commute with the strided path
        let ys = net.forward(&p, &shift(&x, 1, 8, 4, 4)).unwrap();
        let sy = shift(&y, 1, 8, 4, 4);
        for (a, b) in ys.iter().zip(&sy) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indivisible_grid() {
        let spec = ConvNetworkSpec {
            grid_size: 12,
            base_channels: 2,
            down_levels: 3,
            residual_blocks: 0,
            seed: 0,
        };
        assert!(UNet::new(spec).is_err());
    }

    #[test]
    fn full_scale_channel_progression() {
        let spec = ConvNetworkSpec::full_scale(32, 0);
        let layers = spec.layers();
        assert_eq!(layers[0], (1, 32, 1));
        assert_eq!(&layers[1..4], &[(32, 64, 2), (64, 128, 2), (128, 256, 2)]);
        assert_eq!(layers.len(), 1 + 3 + 16 + 6 + 1);
        assert_eq!(*layers.last().unwrap(), (32, 1, 1));
    }
}

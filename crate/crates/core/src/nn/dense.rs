use serde::{Deserialize, Serialize};

use super::{init_uniform, Activation, Network, NetworkParams};
use crate::rng;
use crate::{Error, Result};

/// Fully connected network shape: widths from input to output and the
/// activation applied after each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetworkSpec {
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl DenseNetworkSpec {
    /// Swish hidden layers and an identity output layer.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, seed: u64) -> Self {
        let mut layer_widths = vec![input];
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(output);
        let mut activations = vec![Activation::Swish; hidden.len()];
        activations.push(Activation::Identity);
        DenseNetworkSpec {
            layer_widths,
            activations,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 || self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter(format!(
                "layer widths must be at least two positive entries, got {:?}",
                self.layer_widths
            )));
        }
        if self.activations.len() != self.layer_widths.len() - 1 {
            return Err(Error::dim(
                "dense activations",
                self.layer_widths.len() - 1,
                self.activations.len(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Multilayer perceptron. Parameters are laid out layer by layer as a
/// row-major `out × in` weight matrix followed by the bias.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: DenseNetworkSpec,
    offsets: Vec<usize>,
}

pub struct MlpCache {
    /// Input of each layer (`acts[0]` is the network input).
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(spec: DenseNetworkSpec) -> Self {
        let mut offsets = Vec::with_capacity(spec.layer_widths.len());
        let mut off = 0;
        for w in spec.layer_widths.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        Mlp { spec, offsets }
    }

    pub fn try_new(spec: DenseNetworkSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self::new(spec))
    }

    pub fn spec(&self) -> &DenseNetworkSpec {
        &self.spec
    }

    fn n_layers(&self) -> usize {
        self.spec.layer_widths.len() - 1
    }

    /// Forward pass without a cache, reusing two scratch buffers.
    pub fn eval_into(&self, params: &[f64], input: &[f64], out: &mut [f64]) {
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            let w = &params[self.offsets[l]..self.offsets[l] + n_in * n_out];
            let b = &params[self.offsets[l] + n_in * n_out..self.offsets[l] + n_in * n_out + n_out];
            let act = self.spec.activations[l];
            next.clear();
            next.extend(b.iter().zip(w.chunks_exact(n_in)).map(|(bj, row)| {
                let z = bj + row.iter().zip(&cur).map(|(a, x)| a * x).sum::<f64>();
                act.apply(z)
            }));
            std::mem::swap(&mut cur, &mut next);
        }
        out.copy_from_slice(&cur);
    }
}

impl Network for Mlp {
    type Cache = MlpCache;

    fn input_len(&self) -> usize {
        self.spec.layer_widths[0]
    }

    fn output_len(&self) -> usize {
        *self.spec.layer_widths.last().unwrap()
    }

    fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    fn init_params(&self) -> NetworkParams {
        let mut values = vec![0.0; self.param_count()];
        let mut r = rng::stream(self.spec.seed, rng::domain::INIT, 0);
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            let off = self.offsets[l];
            init_uniform(&mut r, &mut values[off..off + n_in * n_out], n_in, n_out);
        }
        NetworkParams::new(values)
    }

    fn forward_cached(&self, params: &[f64], input: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        let mut pre = Vec::with_capacity(self.n_layers());
        acts.push(input.to_vec());
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            let off = self.offsets[l];
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            let x = &acts[l];
            let z: Vec<f64> = b
                .iter()
                .zip(w.chunks_exact(n_in))
                .map(|(bj, row)| bj + row.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>())
                .collect();
            let act = self.spec.activations[l];
            acts.push(z.iter().map(|&v| act.apply(v)).collect());
            pre.push(z);
        }
        let out = acts.last().unwrap().clone();
        (out, MlpCache { acts, pre })
    }

    fn backward(&self, params: &[f64], cache: &MlpCache, grad_output: &[f64], grad: &mut [f64]) {
        let mut delta: Vec<f64> = grad_output.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            let off = self.offsets[l];
            let act = self.spec.activations[l];
            for (d, z) in delta.iter_mut().zip(&cache.pre[l]) {
                *d *= act.derivative(*z);
            }
            let x = &cache.acts[l];
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for ((row, gbj), dj) in gw.chunks_exact_mut(n_in).zip(gb.iter_mut()).zip(&delta) {
                *gbj += dj;
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += dj * xi;
                }
            }
            if l > 0 {
                let w = &params[off..off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for (row, dj) in w.chunks_exact(n_in).zip(&delta) {
                    for (p, a) in prev.iter_mut().zip(row) {
                        *p += a * dj;
                    }
                }
                delta = prev;
            }
        }
    }
}

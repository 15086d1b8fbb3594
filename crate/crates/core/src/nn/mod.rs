//! Minimal neural-network engine: dense and periodic 2-D convolutional
//! networks with Swish activations, hand-written reverse-mode gradients and
//! Adam.

mod adam;
mod conv;
mod dense;
mod io;
mod train;

pub use adam::{Adam, AdamConfig};
pub use conv::{conv2d_backward, conv2d_forward, upsample_backward, upsample_forward, ConvNetworkSpec, UNet};
pub use dense::{DenseNetworkSpec, Mlp};
pub use io::{load_metadata, load_params, save_params, TrainMetadata};
pub use train::{train, train_mse, MseData, RegressionData, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
    Identity,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Swish => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Swish => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Flat parameter vector plus the Adam moment accumulators that go with it.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub values: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl NetworkParams {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len();
        NetworkParams {
            values,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A differentiable map from a flat input vector to a flat output vector.
pub trait Network {
    type Cache;

    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn param_count(&self) -> usize;

    /// Freshly initialized parameters (deterministic in the spec seed).
    fn init_params(&self) -> NetworkParams;

    /// Forward pass keeping what the backward pass needs.
    fn forward_cached(&self, params: &[f64], input: &[f64]) -> (Vec<f64>, Self::Cache);

    /// Accumulates `∂L/∂params` into `grad_params` given `∂L/∂output`.
    fn backward(&self, params: &[f64], cache: &Self::Cache, grad_output: &[f64], grad_params: &mut [f64]);

    fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_len() {
            return Err(Error::dim("network input", self.input_len(), input.len()));
        }
        if params.len() != self.param_count() {
            return Err(Error::dim("network parameters", self.param_count(), params.len()));
        }
        Ok(self.forward_cached(params, input).0)
    }
}

/// A scalar objective assembled from per-output terms and an optional
/// direct term on the parameters.
pub trait Loss {
    /// Loss contribution of `output` for batch item `item`; writes
    /// `∂L/∂output` into `grad`.
    fn output_term(&self, _item: usize, _output: &[f64], _grad: &mut [f64]) -> f64 {
        0.0
    }

    /// Loss contribution depending on the parameters alone; accumulates its
    /// gradient into `grad`.
    fn param_term(&self, _params: &[f64], _grad: &mut [f64]) -> f64 {
        0.0
    }
}

/// Loss value and parameter gradient of `loss` summed over `inputs`.
pub fn gradient<N: Network, L: Loss + ?Sized>(
    net: &N,
    params: &[f64],
    inputs: &[&[f64]],
    loss: &L,
) -> Result<(f64, Vec<f64>)> {
    if params.len() != net.param_count() {
        return Err(Error::dim("network parameters", net.param_count(), params.len()));
    }
    let mut grad = vec![0.0; params.len()];
    let mut total = loss.param_term(params, &mut grad);
    let mut g_out = vec![0.0; net.output_len()];
    for (item, input) in inputs.iter().enumerate() {
        if input.len() != net.input_len() {
            return Err(Error::dim("network input", net.input_len(), input.len()));
        }
        let (out, cache) = net.forward_cached(params, input);
        g_out.iter_mut().for_each(|g| *g = 0.0);
        total += loss.output_term(item, &out, &mut g_out);
        net.backward(params, &cache, &g_out, &mut grad);
    }
    Ok((total, grad))
}

/// Uniform initialization with variance `2 / (fan_in + fan_out)`.
pub(crate) fn init_uniform(rng: &mut crate::rng::Stream, out: &mut [f64], fan_in: usize, fan_out: usize) {
    use rand::Rng;
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in out {
        *v = rng.gen_range(-a..a);
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Central finite-difference gradient of the same objective.
    pub fn finite_difference<N: Network, L: Loss>(net: &N, params: &[f64], inputs: &[&[f64]], loss: &L, h: f64) -> Vec<f64> {
        let eval = |p: &[f64]| gradient(net, p, inputs, loss).unwrap().0;
        let mut p = params.to_vec();
        (0..params.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + h;
                let fp = eval(&p);
                p[i] = orig - h;
                let fm = eval(&p);
                p[i] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    /// Weighted sum of outputs plus half their squares; smooth and exercises
    /// every output.
    pub struct Probe(pub Vec<f64>);

    impl Loss for Probe {
        fn output_term(&self, _item: usize, output: &[f64], grad: &mut [f64]) -> f64 {
            let mut l = 0.0;
            for ((o, w), g) in output.iter().zip(&self.0).zip(grad.iter_mut()) {
                l += w * o + 0.5 * o * o;
                *g = w + o;
            }
            l
        }
    }

    pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct HalfSquaredParams;
    impl Loss for HalfSquaredParams {
        fn param_term(&self, params: &[f64], grad: &mut [f64]) -> f64 {
            for (g, p) in grad.iter_mut().zip(params) {
                *g += p;
            }
            0.5 * params.iter().map(|p| p * p).sum::<f64>()
        }
    }

    struct OutputSum;
    impl Loss for OutputSum {
        fn output_term(&self, _: usize, output: &[f64], grad: &mut [f64]) -> f64 {
            grad.iter_mut().for_each(|g| *g = 1.0);
            output.iter().sum()
        }
    }

    #[test]
    fn quadratic_param_loss_gradient_is_params() {
        let net = Mlp::new(DenseNetworkSpec::mlp(2, &[3], 1, 7));
        let params = net.init_params();
        let (_, g) = gradient(&net, &params.values, &[], &HalfSquaredParams).unwrap();
        assert_eq!(g, params.values);
    }

    #[test]
    fn identity_network_bias_gradient_is_one() {
        let spec = DenseNetworkSpec {
            layer_widths: vec![2, 2],
            activations: vec![Activation::Identity],
            seed: 0,
        };
        let net = Mlp::new(spec);
        // W = I, b = 0
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let x = [0.3, -0.7];
        let (_, g) = gradient(&net, &params, &[&x], &OutputSum).unwrap();
        assert_eq!(&g[4..], &[1.0, 1.0]);
    }

    #[test]
    fn swish_at_zero() {
        assert_eq!(Activation::Swish.apply(0.0), 0.0);
        assert_eq!(Activation::Swish.derivative(0.0), 0.5);
    }
}

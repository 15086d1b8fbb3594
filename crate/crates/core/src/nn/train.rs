use serde::{Deserialize, Serialize};

use super::{Adam, Network, NetworkParams};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// When set, the learning rate decays geometrically from
    /// `learning_rate` in the first epoch to this value in the last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_learning_rate: Option<f64>,
}

impl TrainConfig {
    pub fn new(batch_size: usize, epochs: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            epochs,
            learning_rate,
            seed,
            final_learning_rate: None,
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            Some(end) if self.epochs > 1 => {
                let f = epoch as f64 / (self.epochs - 1) as f64;
                self.learning_rate * (end / self.learning_rate).powf(f)
            }
            _ => self.learning_rate,
        }
    }

    pub fn validate(&self, n_items: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n_items {
            return Err(Error::InvalidParameter(format!(
                "batch size {} must be in 1..={n_items}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) || self.final_learning_rate.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-item loss seen during each epoch.
    pub loss_history: Vec<f64>,
    /// Loss of the returned parameters over the whole dataset.
    pub final_loss: f64,
}

/// Weighted squared-error regression data. Item `i` at `epoch` contributes
/// `w · Σ_k (net(x)_k − y_k)²`, with `(x, y, w)` produced by [`sample`].
/// Sampling may depend on the epoch (fresh noise per epoch).
///
/// [`sample`]: RegressionData::sample
pub trait RegressionData {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, epoch: usize, item: usize, input: &mut [f64], target: &mut [f64]) -> f64;
}

/// Fixed `(input, target)` pairs under mean-squared error, optionally with
/// per-item weights (normalized to mean one).
#[derive(Debug, Clone)]
pub struct MseData {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
}

impl MseData {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Self {
        MseData {
            inputs,
            targets,
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        let m = weights.iter().sum::<f64>() / weights.len() as f64;
        self.weights = Some(weights.into_iter().map(|w| w / m).collect());
        self
    }
}

impl RegressionData for MseData {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn sample(&self, _epoch: usize, item: usize, input: &mut [f64], target: &mut [f64]) -> f64 {
        input.copy_from_slice(&self.inputs[item]);
        target.copy_from_slice(&self.targets[item]);
        let w = self.weights.as_ref().map_or(1.0, |w| w[item]);
        w / target.len() as f64
    }
}

fn item_loss(output: &[f64], target: &[f64], weight: f64, grad: Option<&mut [f64]>) -> f64 {
    let mut l = 0.0;
    match grad {
        Some(g) => {
            for ((o, t), gk) in output.iter().zip(target).zip(g.iter_mut()) {
                let r = o - t;
                l += r * r;
                *gk = 2.0 * weight * r;
            }
        }
        None => {
            for (o, t) in output.iter().zip(target) {
                l += (o - t) * (o - t);
            }
        }
    }
    weight * l
}

/// Mini-batch Adam on a [`RegressionData`] set. Batch order is a
/// permutation drawn from the `(seed, epoch)` stream, so runs are
/// bit-reproducible.
pub fn train<N: Network, D: RegressionData + ?Sized>(
    net: &N,
    params: &mut NetworkParams,
    data: &D,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let n = data.len();
    if n == 0 {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    config.validate(n)?;
    if params.len() != net.param_count() {
        return Err(Error::dim("network parameters", net.param_count(), params.len()));
    }
    let mut adam = Adam::new(config.learning_rate);
    let mut input = vec![0.0; net.input_len()];
    let mut target = vec![0.0; net.output_len()];
    let mut g_out = vec![0.0; net.output_len()];
    let mut grad = vec![0.0; params.len()];
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        adam.config.learning_rate = config.learning_rate_at(epoch);
        let order = rng::permutation(&mut rng::stream(config.seed, rng::domain::SHUFFLE, epoch as u64), n);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &item in batch {
                let w = data.sample(epoch, item, &mut input, &mut target);
                let (out, cache) = net.forward_cached(&params.values, &input);
                epoch_loss += item_loss(&out, &target, w, Some(&mut g_out));
                net.backward(&params.values, &cache, &g_out, &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(params, &grad);
        }
        let epoch_loss = epoch_loss / n as f64;
        if !epoch_loss.is_finite() || !params.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: epoch_loss });
        }
        history.push(epoch_loss);
    }

    let mut final_loss = 0.0;
    for item in 0..n {
        let w = data.sample(config.epochs, item, &mut input, &mut target);
        let (out, _) = net.forward_cached(&params.values, &input);
        final_loss += item_loss(&out, &target, w, None);
    }
    final_loss /= n as f64;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: config.epochs,
            loss: final_loss,
        });
    }
    Ok(TrainReport {
        loss_history: history,
        final_loss,
    })
}

/// Trains freshly initialized parameters on a mean-squared-error dataset.
pub fn train_mse<N: Network>(net: &N, data: &MseData, config: &TrainConfig) -> Result<(NetworkParams, TrainReport)> {
    if data.inputs.len() != data.targets.len() {
        return Err(Error::dim("training targets", data.inputs.len(), data.targets.len()));
    }
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        if x.len() != net.input_len() {
            return Err(Error::dim("training input", net.input_len(), x.len()));
        }
        if y.len() != net.output_len() {
            return Err(Error::dim("training target", net.output_len(), y.len()));
        }
    }
    let mut params = net.init_params();
    let report = train(net, &mut params, data, config)?;
    Ok((params, report))
}

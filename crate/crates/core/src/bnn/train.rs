use log::debug;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{loss_and_grads, Batch};
use super::network::{forward_batch, Network};
use super::BnnError;
use crate::dataset::batch_indices;
use crate::rng::{self, tag};

/// Normalized, flattened samples ready for the network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingData {
    pub dim: usize,
    /// `len x dim` row-major.
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TrainingData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Copy the rows at `indices` into contiguous buffers.
    pub fn gather(&self, indices: &[usize]) -> TrainingData {
        let mut out = TrainingData {
            dim: self.dim,
            inputs: Vec::with_capacity(indices.len() * self.dim),
            targets: Vec::with_capacity(indices.len()),
            weights: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            out.inputs.extend_from_slice(self.row(i));
            out.targets.push(self.targets[i]);
            out.weights.push(self.weights[i]);
        }
        out
    }

    pub fn as_batch(&self) -> Batch<'_> {
        Batch {
            inputs: &self.inputs,
            targets: &self.targets,
            weights: &self.weights,
        }
    }
}

/// How the KL term is scaled in each minibatch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlScale {
    /// `batch_size / N_train`: one epoch accumulates about one full KL.
    PerSample,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub kl_scale: KlScale,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 8,
            adam: AdamConfig::default(),
            kl_scale: KlScale::PerSample,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), BnnError> {
        if self.epochs == 0 {
            return Err(BnnError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(BnnError::Config("batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(BnnError::Config(format!("learning rate {}", a.learning_rate)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(BnnError::Config("Adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        if let KlScale::Constant(c) = self.kl_scale {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(BnnError::Config(format!("KL scale {c}")));
            }
        }
        Ok(())
    }

    pub fn kl_weight(&self, n_train: usize) -> f64 {
        match self.kl_scale {
            KlScale::PerSample => self.batch_size.min(n_train) as f64 / n_train as f64,
            KlScale::Constant(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    /// Mean minibatch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Unweighted MSE of posterior-mean predictions on the validation set,
    /// normalized units; NaN when no validation set was given.
    pub validation_mse: Vec<f64>,
    /// Loss of every optimizer step, in order.
    pub step_loss: Vec<f64>,
}

/// Posterior-mean MSE over `data` (normalized units).
pub fn mean_mse(net: &Network, data: &TrainingData) -> Result<f64, BnnError> {
    const CHUNK: usize = 8192;
    let mut total = 0.0;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let tape = forward_batch(net, &data.inputs[start * data.dim..end * data.dim], None)?;
        total += tape
            .output
            .iter()
            .zip(&data.targets[start..end])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

/// Minibatch training with Adam.
///
/// Batch order for epoch `e` comes from `derive_seed(seed, [SHUFFLE, e])`;
/// parameter noise from a separate stream, so the batch order does not
/// depend on whether the network has variational layers.
pub fn train(
    net: &mut Network,
    data: &TrainingData,
    validation: Option<&TrainingData>,
    config: &TrainConfig,
) -> Result<History, BnnError> {
    config.validate()?;
    if data.is_empty() {
        return Err(BnnError::EmptyBatch);
    }
    if data.dim != net.input_dim() {
        return Err(BnnError::InputDim {
            expected: net.input_dim(),
            got: data.dim,
        });
    }
    let kl_weight = config.kl_weight(data.len());
    let mut state = AdamState::new(net.param_count());
    let mut eps_rng = rng::stream(config.seed, &[tag::EPSILON]);
    let mut history = History::default();

    for epoch in 0..config.epochs {
        let order = batch_indices(
            data.len(),
            config.batch_size,
            rng::derive_seed(config.seed, &[tag::SHUFFLE, epoch as u64]),
        );
        let mut epoch_loss = 0.0;
        for (b, indices) in order.iter().enumerate() {
            let batch = data.gather(indices);
            let eval = loss_and_grads(net, &batch.as_batch(), &mut eps_rng, kl_weight)
                .map_err(|_| BnnError::Divergence { epoch, batch: b })?;
            adam_step(net.params_mut(), &eval.grads, &mut state, &config.adam);
            if !net.all_finite() {
                return Err(BnnError::Divergence { epoch, batch: b });
            }
            epoch_loss += eval.loss;
            history.step_loss.push(eval.loss);
        }
        let mean_loss = epoch_loss / order.len() as f64;
        let val = match validation {
            Some(v) if !v.is_empty() => mean_mse(net, v)?,
            _ => f64::NAN,
        };
        debug!("epoch {}: loss {mean_loss:.6}, validation mse {val:.6}", epoch + 1);
        history.train_loss.push(mean_loss);
        history.validation_mse.push(val);
    }
    Ok(history)
}

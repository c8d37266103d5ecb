//! Loss, initialization, optimizer, training loop and evaluation.

mod adam;
pub mod init;
mod loss;
mod metrics;

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState};
pub use loss::cross_entropy;
pub use metrics::Metrics;

use crate::data::{PatchDataset, Split};
use crate::error::{invalid, Error, Result};
use crate::model::{argmax, FusionModel};
use crate::tape::Tape;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Seeds shuffling and dropout.
    pub seed: u64,
    /// Evaluate the test split every this many epochs; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-6,
            epochs: 500,
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Error::Config {
            field,
            reason: reason.into(),
        };
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(bad("learning_rate", "must be a finite non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0) {
            return Err(bad("adam_beta1", "must lie in (0, 1)"));
        }
        if !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return Err(bad("adam_beta2", "must lie in (0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(bad("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Summary of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the training-mode predictions made while fitting.
    pub train_oa: f64,
    pub test_oa: Option<f64>,
}

/// Receives a record after every epoch.
pub trait TrainObserver {
    fn on_epoch(&mut self, record: &EpochRecord);
}

impl TrainObserver for () {
    fn on_epoch(&mut self, _: &EpochRecord) {}
}

impl<F: FnMut(&EpochRecord)> TrainObserver for F {
    fn on_epoch(&mut self, record: &EpochRecord) {
        self(record)
    }
}

// Dropout draws from its own stream so that the shuffling order does not
// depend on the dropout rate.
const DROPOUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Fits `model` on the training split of `data` with mini-batch Adam on the
/// batch-mean cross-entropy. Deterministic for a given `cfg.seed`.
pub fn train(
    model: &mut FusionModel,
    data: &PatchDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(invalid("train", "training split is empty"));
    }
    let test_idx = data.indices(Split::Test);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let mut state = AdamState::new(model.params());
    let mut step = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.params_mut().zero_grads();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let patch = data.patch(i);
                let mut tape = Tape::new();
                let trace = model.forward(&mut tape, &patch.hsi, &patch.lidar, true, &mut dropout_rng)?;
                let loss = cross_entropy(&mut tape, trace.probs, patch.label)?;
                let value = tape.value(loss)[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
                }
                loss_sum += value;
                if argmax(tape.value(trace.probs)) == patch.label {
                    correct += 1;
                }
                let scaled = tape.scale(loss, weight);
                tape.backward(scaled, model.params_mut())?;
            }
            step += 1;
            adam_step(model.params_mut(), &mut state, step, cfg)?;
            model.params_mut().zero_grads();
        }
        let test_oa = if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 && !test_idx.is_empty() {
            Some(evaluate(model, data, &test_idx)?.overall_accuracy)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / train_idx.len() as f64,
            train_oa: correct as f64 / train_idx.len() as f64,
            test_oa,
        };
        observer.on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

/// Inference-mode class predictions for the given dataset entries.
pub fn predict(model: &FusionModel, data: &PatchDataset, indices: &[usize]) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            let patch = data.patch(i);
            model.predict(&patch.hsi, &patch.lidar).map(|p| argmax(&p))
        })
        .collect()
}

/// Argmax predictions in inference mode, scored against the stored labels.
pub fn evaluate(model: &FusionModel, data: &PatchDataset, indices: &[usize]) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(invalid("evaluate", "empty split"));
    }
    let preds = predict(model, data, indices)?;
    let pairs: Vec<(usize, usize)> = indices.iter().zip(preds).map(|(&i, p)| (data.item(i).label, p)).collect();
    let metrics = Metrics::from_pairs(model.config().n_classes, &pairs)?;
    debug_assert_eq!(metrics.total() as usize, indices.len());
    Ok(metrics)
}

/// [`evaluate`] on every entry tagged with `split`.
pub fn evaluate_split(model: &FusionModel, data: &PatchDataset, split: Split) -> Result<Metrics> {
    evaluate(model, data, &data.indices(split))
}

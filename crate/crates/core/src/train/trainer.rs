use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::{Adam, AdamConfig, OptimError};
use super::metrics::evaluate;
use super::scheduler::{PlateauScheduler, SchedulerConfig};
use crate::data::{batch_order, Batch, UtteranceSample};
use crate::layers::Mode;
use crate::model::{Checkpoint, CheckpointError, Model, ModelError};
use crate::seed::{derive_indexed, rng_for};
use crate::tensor::{GradTape, Scalar, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    #[serde(flatten)]
    pub adam: AdamConfig,
    /// Keep the audio feature encoder and text projection fixed.
    pub freeze_encoders: bool,
    /// Stop after this many epochs without a new best held-out loss.
    pub early_stop_patience: Option<usize>,
    /// Training loss above which a run is declared diverged.
    pub divergence_threshold: f64,
    /// When set, this fraction of the training samples is held out for
    /// monitoring instead of the test set.
    pub inner_split: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            eval_batch_size: 16,
            adam: AdamConfig::default(),
            freeze_encoders: false,
            early_stop_patience: None,
            divergence_threshold: 1e4,
            inner_split: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("epochs and batch sizes must be positive".into());
        }
        if !(self.adam.lr.is_finite() && self.adam.lr >= 0.0) {
            return fail(format!("learning rate must be non-negative, got {}", self.adam.lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return fail("Adam betas must be in [0, 1)".into());
        }
        if let Some(f) = self.inner_split {
            if !(f > 0.0 && f < 1.0) {
                return fail(format!("inner_split must be in (0, 1), got {f}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        history: Vec<EpochRecord>,
    },
    #[error("training diverged at epoch {epoch}: loss {loss:.3e}")]
    Diverged {
        epoch: usize,
        loss: f64,
        history: Vec<EpochRecord>,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub held_out_loss: f64,
    pub held_out_unweighted_accuracy: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub best: bool,
}

pub struct TrainOutcome<T> {
    /// Weights of the epoch with the lowest held-out loss.
    pub model: Model<T>,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// One JSON object per line.
pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Splits off the monitoring set when `inner_split` asks for one.
fn monitoring_split<'a>(
    train_set: &[&'a UtteranceSample],
    held_out: &[&'a UtteranceSample],
    config: &TrainConfig,
    seed: u64,
) -> (Vec<&'a UtteranceSample>, Vec<&'a UtteranceSample>) {
    match config.inner_split {
        None => (train_set.to_vec(), held_out.to_vec()),
        Some(frac) => {
            let mut idx: Vec<usize> = (0..train_set.len()).collect();
            idx.shuffle(&mut rng_for(seed, "inner-split"));
            let n = ((train_set.len() as f64 * frac).round() as usize).clamp(1, train_set.len() - 1);
            let (mon, fit) = idx.split_at(n);
            (
                fit.iter().map(|&i| train_set[i]).collect(),
                mon.iter().map(|&i| train_set[i]).collect(),
            )
        }
    }
}

/// Trains `model` on `train_set`, monitoring `held_out` after every epoch
/// for learning-rate scheduling and best-checkpoint selection.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    train_set: &[&UtteranceSample],
    held_out: &[&UtteranceSample],
    config: &TrainConfig,
    scheduler: &SchedulerConfig,
    seed: u64,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if held_out.is_empty() && config.inner_split.is_none() {
        return Err(TrainError::EmptySplit("held-out"));
    }
    if config.inner_split.is_some() && train_set.len() < 2 {
        return Err(TrainError::EmptySplit("inner held-out"));
    }
    let (fit, monitor) = monitoring_split(train_set, held_out, config, seed);
    if config.freeze_encoders {
        model.set_encoders_trainable(false);
    }
    let mut adam = Adam::new(config.adam.clone(), &model.params);
    let mut plateau = PlateauScheduler::new(scheduler.clone());
    let mut dropout_rng = rng_for(seed, "dropout");
    let mut history: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        let lr = adam.lr();
        let order = batch_order(fit.len(), config.batch_size, Some(derive_indexed(seed, "shuffle", epoch as u64)));
        let mut loss_sum = 0.0;
        for (b, group) in order.iter().enumerate() {
            let refs: Vec<&UtteranceSample> = group.iter().map(|&i| fit[i]).collect();
            let batch = Batch::from_samples(&refs);
            let (grads, stats, loss) = {
                let mut tape = GradTape::new(&model.params);
                let out = model.forward(&mut tape, &batch, Mode::Train, &mut dropout_rng)?;
                let loss = match tape.cross_entropy(out.logits, &batch.label_indices()) {
                    Ok(l) => l,
                    Err(TensorError::NonFinite { .. }) => {
                        return Err(TrainError::NonFiniteLoss { epoch, batch: b, history })
                    }
                    Err(e) => return Err(e.into()),
                };
                let value = tape.item(loss).expect("scalar loss").as_f64();
                if value > config.divergence_threshold {
                    return Err(TrainError::Diverged { epoch, loss: value, history });
                }
                (tape.backward(loss)?, out.bn_stats, value)
            };
            model.params.accumulate(&grads);
            model.update_batch_norm(&stats);
            adam.step(&mut model.params)?;
            loss_sum += loss * refs.len() as f64;
        }
        let eval = evaluate(&model, &monitor, config.eval_batch_size)?;
        let improved = best.as_ref().is_none_or(|(l, _, _)| eval.loss < *l);
        if improved {
            best = Some((eval.loss, epoch, Checkpoint::from_model(&model)));
            since_best = 0;
        } else {
            since_best += 1;
        }
        adam.set_lr(plateau.step(eval.loss, lr));
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / fit.len() as f64,
            held_out_loss: eval.loss,
            held_out_unweighted_accuracy: eval.metrics.unweighted_accuracy,
            lr,
            best: improved,
        });
        if config.early_stop_patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    let (_, best_epoch, checkpoint) = best.expect("at least one epoch ran");
    let mut restored: Model<T> = checkpoint.to_model()?;
    if config.freeze_encoders {
        restored.set_encoders_trainable(false);
    }
    Ok(TrainOutcome {
        model: restored,
        checkpoint,
        history,
        best_epoch,
    })
}

//! Optimization loop, evaluation and the three end-to-end workflows.
//!
//! Training is single-threaded and every random choice (initialization,
//! batch order, head weights) comes from a stream derived from the
//! configured seed, so a run is bit-reproducible.

mod metrics;
mod optim;
mod workflow;

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Gradients, Tape};
use crate::data::{DataError, LabeledDataset, SplitPair};
use crate::fusion::{FusedNetwork, FusionError};
use crate::geometry::FeatureShape;
use crate::nn::{all_trainable, apply_moments, Mode, NetworkError, NetworkGraph};
use crate::rng::SeededRng;
use crate::tensor::{Tensor, TensorError};

pub use metrics::{EpochMetrics, EvalMetrics, MetricsRecord, RunKind, TransferTask};
pub use optim::{sgd_momentum_step, ParamTable, Velocity};
pub use workflow::{fusion_retrain, pretrain_model, transfer_learn, FusionOptions, CLASS_NAMES_KEY};

/// Batch size used by [`evaluate`]; only affects speed.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model predicts {model} classes but the dataset has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("model expects {model} inputs but the dataset holds {data}")]
    InputMismatch { model: FeatureShape, data: FeatureShape },
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("sample id {0} appears in both the training and the held-out split")]
    Leak(u64),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient for unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("shape mismatch for `{param}`: parameter {param_shape:?}, got {other:?}")]
    ShapeMismatch { param: String, param_shape: Vec<usize>, other: Vec<usize> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Keep everything before the flatten boundary fixed.
    pub freeze_backbones: bool,
    /// Reshuffle the training set every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            freeze_backbones: false,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2 for batch normalization".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Outcome of one forward/backward pass over a batch.
pub struct BatchOutcome {
    pub loss: f64,
    pub correct: usize,
    pub grads: Gradients,
}

/// A network the training loop can drive.
pub trait Learner: ParamTable {
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> FeatureShape;
    /// Eval-mode logits; must not mutate anything.
    fn logits(&self, batch: &Tensor) -> Result<Tensor, TrainError>;
    /// Forward and backward on one batch. Batchnorm running statistics of
    /// trainable backbones are folded in; parameters are left for the
    /// optimizer.
    fn train_batch(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        freeze_backbones: bool,
    ) -> Result<BatchOutcome, TrainError>;
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits.data().chunks_exact(classes).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// Index of the first maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frozen backbones also keep their batchnorm statistics: they run in eval
/// mode. Heads hold no batchnorm, so nothing else is affected.
fn train_mode(freeze_backbones: bool) -> Mode {
    if freeze_backbones {
        Mode::Eval
    } else {
        Mode::Train
    }
}

impl Learner for NetworkGraph {
    fn num_classes(&self) -> usize {
        NetworkGraph::num_classes(self)
    }

    fn input_shape(&self) -> FeatureShape {
        NetworkGraph::input_shape(self)
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor, TrainError> {
        Ok(self.eval_logits(batch)?)
    }

    fn train_batch(&mut self, batch: &Tensor, labels: &[usize], freeze: bool) -> Result<BatchOutcome, TrainError> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = {
            let head_only = |name: &str| !self.is_backbone_param(name);
            let trainable: crate::nn::Trainable<'_> = if freeze { &head_only } else { &all_trainable };
            self.forward_on_tape(&mut tape, x, train_mode(freeze), false, "", trainable)?
        };
        let correct = count_correct(tape.value(out.output)?, labels);
        let loss = tape.softmax_cross_entropy(out.output, labels)?;
        let loss_value = tape.value(loss)?.data()[0] as f64;
        let grads = tape.backward(loss)?;
        apply_moments(self, &out.moments);
        Ok(BatchOutcome { loss: loss_value, correct, grads })
    }
}

impl Learner for FusedNetwork {
    fn num_classes(&self) -> usize {
        FusedNetwork::num_classes(self)
    }

    fn input_shape(&self) -> FeatureShape {
        FusedNetwork::input_shape(self)
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor, TrainError> {
        Ok(self.eval_logits(batch)?)
    }

    fn train_batch(&mut self, batch: &Tensor, labels: &[usize], freeze: bool) -> Result<BatchOutcome, TrainError> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward_on_tape(&mut tape, x, train_mode(freeze), false, freeze)?;
        let correct = count_correct(tape.value(out.logits)?, labels);
        let loss = tape.softmax_cross_entropy(out.logits, labels)?;
        let loss_value = tape.value(loss)?.data()[0] as f64;
        self.apply_moments(&out);
        let grads = tape.backward(loss)?;
        Ok(BatchOutcome { loss: loss_value, correct, grads })
    }
}

/// Top-1 accuracy and mean cross-entropy over the whole dataset, in eval
/// mode. The loss is accumulated in f64 from the logits.
pub fn evaluate<L: Learner + ?Sized>(model: &L, data: &LabeledDataset) -> Result<EvalMetrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    check_compatible(model, data)?;
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.logits(&x)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(classes).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[label] as f64;
        }
    }
    let n = data.len() as f64;
    Ok(EvalMetrics { accuracy: correct as f64 / n, loss: loss / n })
}

fn check_compatible<L: Learner + ?Sized>(model: &L, data: &LabeledDataset) -> Result<(), TrainError> {
    if model.num_classes() != data.num_classes() {
        return Err(TrainError::ClassMismatch { model: model.num_classes(), data: data.num_classes() });
    }
    if model.input_shape() != data.sample_shape() {
        return Err(TrainError::InputMismatch { model: model.input_shape(), data: data.sample_shape() });
    }
    Ok(())
}

/// Splits a permutation into batches of `size`; a trailing batch of one
/// sample is merged into the previous batch since batchnorm needs two.
pub fn batch_plan(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(size).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
        let start = (batches.len() - 1) * size;
        *batches.last_mut().unwrap() = &order[start..];
    }
    batches
}

/// Trains `model` on `split.train` and evaluates on `split.test` before
/// the first step and after every epoch. Final parameters stay in `model`.
pub fn train<L: Learner + ?Sized>(
    model: &mut L,
    split: &SplitPair,
    cfg: &TrainConfig,
) -> Result<MetricsRecord, TrainError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if split.test.is_empty() {
        return Err(TrainError::EmptyDataset("held-out"));
    }
    check_compatible(model, &split.train)?;
    check_compatible(model, &split.test)?;
    let held_out: HashSet<u64> = split.test.ids().iter().copied().collect();
    if let Some(&id) = split.train.ids().iter().find(|id| held_out.contains(id)) {
        return Err(TrainError::Leak(id));
    }

    let started = Instant::now();
    let initial = evaluate(model, &split.test)?;
    log::info!("initial held-out accuracy {:.4}", initial.accuracy);
    let mut rng = SeededRng::derive(cfg.seed, "batch-order");
    let mut velocity = Velocity::new();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (bi, batch) in batch_plan(&order, cfg.batch_size).into_iter().enumerate() {
            let (x, labels) = split.train.batch(batch)?;
            let out = model.train_batch(&x, &labels, cfg.freeze_backbones)?;
            if !out.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            sgd_momentum_step(model, &out.grads, &mut velocity, cfg.learning_rate, cfg.momentum)?;
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;
        }
        let test = evaluate(model, &split.test)?;
        let n = split.train.len() as f64;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            test_loss: test.loss,
            test_accuracy: test.accuracy,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: train loss {:.4} acc {:.4}, held-out acc {:.4} ({:.1}s)",
            cfg.epochs,
            m.train_loss,
            m.train_accuracy,
            m.test_accuracy,
            m.seconds
        );
        history.push(m);
    }
    let (best_epoch, best_test_accuracy) = history
        .iter()
        .map(|e| (e.epoch, e.test_accuracy))
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok(MetricsRecord {
        kind: RunKind::Train,
        model: String::new(),
        dataset: split.train.source().to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        config_hash: cfg.config_hash(),
        split_hash: split.split_hash(),
        task: None,
        initial,
        final_test_accuracy: history.last().expect("epochs ≥ 1").test_accuracy,
        history,
        best_epoch,
        best_test_accuracy,
        wall_seconds: started.elapsed().as_secs_f64(),
        extra: Default::default(),
    })
}

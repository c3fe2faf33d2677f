//! Run records: one JSON document per training run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Plain training of an already built network.
    Train,
    Pretrain,
    /// Backbone restored from a checkpoint with a fresh head.
    Transfer,
    /// Two backbones fused and retrained together.
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

/// Source and target of a transfer: dataset ids and label spaces.
/// The target label space fixes the retrained head's class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferTask {
    pub source_datasets: Vec<String>,
    pub target_dataset: String,
    pub source_classes: Vec<Vec<String>>,
    pub target_classes: Vec<String>,
}

impl TransferTask {
    pub fn num_classes(&self) -> usize {
        self.target_classes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RunKind,
    /// Architecture id(s) of the trained model.
    pub model: String,
    /// Dataset the model was trained and evaluated on.
    pub dataset: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub split_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TransferTask>,
    /// Held-out metrics before the first step.
    pub initial: EvalMetrics,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
    pub final_test_accuracy: f64,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl MetricsRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json() + "\n")
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Checks the record's own consistency rules; returns the first violation.
    pub fn check(&self) -> Result<(), String> {
        if self.history.len() != self.config.epochs {
            return Err(format!("{} epochs recorded, config asks for {}", self.history.len(), self.config.epochs));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut accs = vec![self.initial.accuracy, self.best_test_accuracy, self.final_test_accuracy];
        for e in &self.history {
            accs.extend([e.train_accuracy, e.test_accuracy]);
        }
        if let Some(bad) = accs.into_iter().find(|&a| !in_unit(a)) {
            return Err(format!("accuracy {bad} outside [0, 1]"));
        }
        Ok(())
    }

    /// Equality of everything except wall-clock timings.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| {
            let mut r = r.clone();
            r.wall_seconds = 0.0;
            r.history.iter_mut().for_each(|e| e.seconds = 0.0);
            r
        };
        strip(self) == strip(other)
    }
}

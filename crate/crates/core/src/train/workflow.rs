//! Pretraining, the transfer-learning baseline and hybrid fusion retraining.

use serde_json::json;

use crate::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::data::SplitPair;
use crate::fusion::{build_fused, propose_pairing, FusedNetwork, FusionPlan, Side, TapPoint};
use crate::model::Model;
use crate::nn::{Architecture, NetworkGraph};
use crate::rng::SeededRng;
use crate::train::{train, MetricsRecord, RunKind, TrainConfig, TrainError, TransferTask};

/// Key under which pretraining stores the label names in checkpoint metadata.
pub const CLASS_NAMES_KEY: &str = "class_names";

fn arch_label(arch: &Architecture) -> String {
    arch.id.clone().unwrap_or_else(|| "custom".into())
}

fn class_names(ckpt: &Checkpoint) -> Vec<String> {
    ckpt.meta
        .extra
        .get(CLASS_NAMES_KEY)
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_else(|| (0..ckpt.model.num_classes()).map(|i| i.to_string()).collect())
}

fn single(ckpt: &Checkpoint, role: &str) -> Result<NetworkGraph, TrainError> {
    match &ckpt.model {
        Model::Single(n) => Ok(n.clone()),
        Model::Fused(_) => {
            Err(TrainError::Checkpoint(format!("{role} must hold a single network, found a fused model")))
        }
    }
}

/// Initializes `arch` from the seed, trains it and packs the result into a
/// checkpoint whose metadata names the dataset and final accuracy.
pub fn pretrain_model(
    arch: &Architecture,
    split: &SplitPair,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, MetricsRecord), TrainError> {
    cfg.validate()?;
    let mut net = NetworkGraph::build(arch.clone())?;
    net.init_weights(SeededRng::derive(cfg.seed, "init").next_u64());
    let mut record = train(&mut net, split, cfg)?;
    record.kind = RunKind::Pretrain;
    record.model = arch_label(arch);
    let mut meta = CheckpointMeta {
        dataset: split.train.source().to_string(),
        seed: cfg.seed,
        final_accuracy: Some(record.final_test_accuracy),
        timestamp: CheckpointMeta::now(),
        ..Default::default()
    };
    meta.extra.insert(CLASS_NAMES_KEY.into(), json!(split.train.class_names()));
    meta.extra.insert("config_hash".into(), json!(record.config_hash));
    meta.extra.insert("split_hash".into(), json!(record.split_hash));
    Ok((Checkpoint { version: FORMAT_VERSION, model: Model::Single(net), meta }, record))
}

/// Restores the checkpoint's backbone, replaces everything after the
/// flatten boundary with a fresh dense head for the target classes and
/// trains on the target split.
pub fn transfer_learn(
    ckpt: &Checkpoint,
    target: &SplitPair,
    cfg: &TrainConfig,
    head_sizes: &[usize],
) -> Result<(NetworkGraph, MetricsRecord), TrainError> {
    cfg.validate()?;
    let source = single(ckpt, "transfer source")?;
    let head_seed = SeededRng::derive(cfg.seed, "transfer-head").next_u64();
    let mut net = source.with_new_head(head_sizes, target.num_classes(), head_seed)?;
    let mut record = train(&mut net, target, cfg)?;
    record.kind = RunKind::Transfer;
    record.model = arch_label(source.architecture());
    record.task = Some(TransferTask {
        source_datasets: vec![ckpt.meta.dataset.clone()],
        target_dataset: target.train.source().to_string(),
        source_classes: vec![class_names(ckpt)],
        target_classes: target.train.class_names().to_vec(),
    });
    Ok((net, record))
}

#[derive(Debug, Clone)]
pub struct FusionOptions {
    /// Use this plan instead of proposing one.
    pub plan: Option<FusionPlan>,
    pub max_links: usize,
    /// Hidden layer widths of the head over the concatenated features.
    pub head_sizes: Vec<usize>,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions { plan: None, max_links: 4, head_sizes: vec![128] }
    }
}

/// Fuses two pretrained networks and retrains the result on the target.
pub fn fusion_retrain(
    a: &Checkpoint,
    b: &Checkpoint,
    target: &SplitPair,
    cfg: &TrainConfig,
    opts: &FusionOptions,
) -> Result<(FusedNetwork, MetricsRecord), TrainError> {
    cfg.validate()?;
    let na = single(a, "model A")?;
    let nb = single(b, "model B")?;
    let plan = match &opts.plan {
        Some(p) => p.clone(),
        None => propose_pairing(&TapPoint::ladder(Side::A, &na), &TapPoint::ladder(Side::B, &nb), opts.max_links)?,
    };
    let mut fused = build_fused(&na, &nb, &plan, target.num_classes(), &opts.head_sizes, cfg.seed)?;
    let mut record = train(&mut fused, target, cfg)?;
    record.kind = RunKind::Hybrid;
    record.model = format!("{}+{}", arch_label(na.architecture()), arch_label(nb.architecture()));
    record.task = Some(TransferTask {
        source_datasets: vec![a.meta.dataset.clone(), b.meta.dataset.clone()],
        target_dataset: target.train.source().to_string(),
        source_classes: vec![class_names(a), class_names(b)],
        target_classes: target.train.class_names().to_vec(),
    });
    let (ab, ba) = fused.plan().directions();
    record.extra.insert("links_a_to_b".into(), json!(ab));
    record.extra.insert("links_b_to_a".into(), json!(ba));
    record.extra.insert("one_way".into(), json!(fused.plan().one_way));
    Ok((fused, record))
}

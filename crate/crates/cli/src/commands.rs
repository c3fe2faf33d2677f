//! The experiment commands. Each one validates the config for what it
//! reads, runs its jobs and writes into the run directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context as _};
use fusionforge_core::checkpoint::{encode, load_checkpoint, Checkpoint, CheckpointMeta};
use fusionforge_core::fusion::FusionPlan;
use fusionforge_core::model::Model;
use fusionforge_core::selfcheck::{run_checks, CheckLevel, CheckReport};
use fusionforge_core::train::{fusion_retrain, pretrain_model, transfer_learn, FusionOptions};
use fusionforge_core::{MetricsRecord, TrainConfig};
use serde_json::json;

use crate::compare::{Comparison, ComparisonRow, MissingRuns};
use crate::config::{DatasetSpec, ExperimentConfig, ModelSource, Needs, Side};
use crate::datasets::{DataCache, Resolved};
use crate::error::{CliError, Result};
use crate::runs::{
    path_hash, write_file, RunLayout, RunManifest, CHECKPOINT_FILE, COMPARISON_JSON, COMPARISON_TEXT, CONFIG_FILE,
    METRICS_FILE, PLAN_FILE,
};

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces the seed list.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    /// Sets `retrain.freeze_backbones`; never clears it.
    pub freeze_backbones: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(plan) = &self.plan {
            cfg.fusion.plan = Some(plan.clone());
        }
        if self.freeze_backbones {
            cfg.retrain.freeze_backbones = true;
        }
    }
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

/// Shared state for one command invocation.
pub struct Context {
    pub data: DataCache,
    /// Parallel (model, seed) jobs.
    pub jobs: usize,
    hashes: Mutex<HashMap<PathBuf, String>>,
    splits: Mutex<HashMap<(String, u64), Arc<Resolved>>>,
}

impl Context {
    pub fn new(data_root: impl Into<PathBuf>, jobs: usize) -> Self {
        Context {
            data: DataCache::new(data_root),
            jobs: jobs.max(1),
            hashes: Mutex::default(),
            splits: Mutex::default(),
        }
    }

    fn hash(&self, path: &Path) -> Result<String> {
        if let Some(h) = self.hashes.lock().expect("hash cache").get(path) {
            return Ok(h.clone());
        }
        let h = path_hash(path)?;
        self.hashes.lock().expect("hash cache").insert(path.to_path_buf(), h.clone());
        Ok(h)
    }

    fn split(&self, spec: &DatasetSpec, field: &str, cfg: &ExperimentConfig, seed: u64) -> Result<Arc<Resolved>> {
        let key = (serde_json::to_string(spec).expect("spec serializes"), seed);
        if let Some(r) = self.splits.lock().expect("split cache").get(&key) {
            return Ok(r.clone());
        }
        let r = Arc::new(self.data.resolve(spec, field, cfg.input, seed)?);
        self.splits.lock().expect("split cache").insert(key, r.clone());
        Ok(r)
    }

    fn record_dataset(&self, m: &mut RunManifest, spec: &DatasetSpec) -> Result<()> {
        if let Some(dir) = spec.resolved_path(self.data.root()) {
            m.input("dataset", &dir, self.hash(&dir)?);
        }
        Ok(())
    }
}

fn validated(cfg: &ExperimentConfig, ctx: &Context, needs: Needs) -> Result<RunLayout> {
    let errors = cfg.validate(ctx.data.root(), needs);
    if !errors.is_empty() {
        return Err(CliError::Config(errors));
    }
    Ok(RunLayout::new(cfg))
}

/// Runs `f` over `jobs` on up to `workers` threads; results keep job order.
fn run_jobs<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = f(job);
                *slots[i].lock().expect("job slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("job slot").expect("every job ran")).collect()
}

fn seeded(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..base.clone() }
}

fn manifest(layout: &RunLayout, cfg: &ExperimentConfig, command: &str, seed: u64, dir: &Path) -> Result<RunManifest> {
    layout.write_config(cfg, seed)?;
    let path = layout.seed_dir(seed).join(CONFIG_FILE);
    let config = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut m = RunManifest::new(command, seed, &config);
    m.output(dir, CONFIG_FILE, &config)?;
    Ok(m)
}

fn checkpoint_bytes(model: &Model, dataset: &str, seed: u64, accuracy: f64, resolved: &Resolved) -> Vec<u8> {
    let meta = CheckpointMeta {
        dataset: dataset.to_string(),
        seed,
        final_accuracy: Some(accuracy),
        timestamp: CheckpointMeta::now(),
        normalization: resolved.stats.clone(),
        extra: Default::default(),
    };
    encode(model, &meta)
}

fn metrics_bytes(record: &MetricsRecord) -> Vec<u8> {
    (record.to_json() + "\n").into_bytes()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    /// `None` for the hybrid run.
    pub side: Option<Side>,
    pub dir: PathBuf,
    pub metrics: MetricsRecord,
    /// Hash over parameter names and values; stable across reruns.
    pub param_hash: String,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, ctx: &Context) -> Result<Vec<RunOutcome>> {
    let layout = validated(cfg, ctx, Needs::Pretrain)?;
    let jobs: Vec<(u64, Side)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| {
            Side::BOTH.into_iter().filter(|&side| cfg.model(side).needs_pretraining()).map(move |side| (s, side))
        })
        .collect();
    if jobs.is_empty() {
        log::info!("both models are checkpoints; nothing to pretrain");
    }
    run_jobs(&jobs, ctx.jobs, |&(seed, side)| {
        let spec = cfg.pretrain_dataset(side).expect("validated");
        let field = format!("pretrain_dataset_{}", side.dir_name());
        let resolved = ctx.split(spec, &field, cfg, seed)?;
        let split = &resolved.split;
        let source = cfg.model(side);
        let arch = source
            .architecture(cfg.input, split.num_classes())
            .map_err(|e| CliError::config(format!("model_{}", side.dir_name()), e))?;
        log::info!(
            "pretrain seed {seed}, {side} ({}) on {}",
            arch.id.as_deref().unwrap_or("custom"),
            split.train.source()
        );
        let (ckpt, mut metrics) = pretrain_model(&arch, split, &seeded(&cfg.pretrain, seed))
            .with_context(|| format!("pretraining {side}"))?;
        metrics.extra.insert("side".into(), json!(side.dir_name()));

        let dir = layout.pretrain_dir(seed, side);
        let mut m = manifest(&layout, cfg, "pretrain", seed, &dir)?;
        ctx.record_dataset(&mut m, spec)?;
        if let ModelSource::ArchitectureFile(p) = &source {
            m.input("architecture", p, ctx.hash(p)?);
        }
        let mut meta = ckpt.meta.clone();
        meta.normalization = resolved.stats.clone();
        m.output(&dir, CHECKPOINT_FILE, &encode(&ckpt.model, &meta))?;
        m.output(&dir, METRICS_FILE, &metrics_bytes(&metrics))?;
        let param_hash = ckpt.model.param_hash();
        m.notes.insert("param_hash".into(), json!(param_hash));
        m.finish(&dir)?;
        Ok(RunOutcome { seed, side: Some(side), dir, metrics, param_hash })
    })
}

fn resolve_checkpoint(
    cfg: &ExperimentConfig,
    layout: &RunLayout,
    seed: u64,
    side: Side,
) -> Result<(PathBuf, Checkpoint)> {
    let path = match cfg.model(side) {
        ModelSource::Checkpoint(p) => p,
        _ => layout.pretrain_dir(seed, side).join(CHECKPOINT_FILE),
    };
    if !path.is_file() {
        return Err(
            anyhow!("missing checkpoint {} for {side}; run `fusionforge pretrain` first", path.display()).into()
        );
    }
    let ckpt = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    let have = ckpt.model.input_shape();
    if have != cfg.input {
        return Err(CliError::config(
            format!("model_{}", side.dir_name()),
            format!("{} takes {have} inputs, the experiment uses {}", path.display(), cfg.input),
        ));
    }
    Ok((path, ckpt))
}

pub fn cmd_baseline(cfg: &ExperimentConfig, ctx: &Context) -> Result<Vec<RunOutcome>> {
    let layout = validated(cfg, ctx, Needs::Retrain)?;
    let jobs: Vec<(u64, Side)> = cfg.seeds.iter().flat_map(|&s| Side::BOTH.map(|side| (s, side))).collect();
    run_jobs(&jobs, ctx.jobs, |&(seed, side)| {
        let (ckpt_path, ckpt) = resolve_checkpoint(cfg, &layout, seed, side)?;
        let resolved = ctx.split(&cfg.retrain_dataset, "retrain_dataset", cfg, seed)?;
        let split = &resolved.split;
        log::info!("baseline seed {seed}, {side} from {} on {}", ckpt.meta.dataset, split.train.source());
        let tc = seeded(&cfg.retrain, seed);
        let (net, mut metrics) = transfer_learn(&ckpt, split, &tc, &cfg.transfer_head)
            .with_context(|| format!("transfer learning {side}"))?;
        metrics.extra.insert("side".into(), json!(side.dir_name()));

        let dir = layout.baseline_dir(seed, side);
        let mut m = manifest(&layout, cfg, "baseline", seed, &dir)?;
        ctx.record_dataset(&mut m, &cfg.retrain_dataset)?;
        m.input("checkpoint", &ckpt_path, ctx.hash(&ckpt_path)?);
        let model = Model::Single(net);
        let bytes = checkpoint_bytes(&model, split.train.source(), seed, metrics.final_test_accuracy, &resolved);
        m.output(&dir, CHECKPOINT_FILE, &bytes)?;
        m.output(&dir, METRICS_FILE, &metrics_bytes(&metrics))?;
        let param_hash = model.param_hash();
        m.notes.insert("param_hash".into(), json!(param_hash));
        m.notes.insert("freeze_backbones".into(), json!(tc.freeze_backbones));
        m.finish(&dir)?;
        Ok(RunOutcome { seed, side: Some(side), dir, metrics, param_hash })
    })
}

pub fn cmd_fuse_retrain(cfg: &ExperimentConfig, ctx: &Context) -> Result<Vec<RunOutcome>> {
    let layout = validated(cfg, ctx, Needs::Retrain)?;
    let fixed_plan = match &cfg.fusion.plan {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::config("fusion.plan", format!("{}: {e}", p.display())))?;
            Some(
                FusionPlan::from_json(&text)
                    .map_err(|e| CliError::config("fusion.plan", format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let opts =
        FusionOptions { plan: fixed_plan, max_links: cfg.fusion.max_links, head_sizes: cfg.fusion.head_sizes.clone() };
    let plan_source = cfg.fusion.plan.as_ref().map_or("auto".to_string(), |p| p.display().to_string());
    run_jobs(&cfg.seeds, ctx.jobs, |&seed| {
        let (path_a, a) = resolve_checkpoint(cfg, &layout, seed, Side::A)?;
        let (path_b, b) = resolve_checkpoint(cfg, &layout, seed, Side::B)?;
        let resolved = ctx.split(&cfg.retrain_dataset, "retrain_dataset", cfg, seed)?;
        let split = &resolved.split;
        log::info!("hybrid seed {seed}: {} + {} on {}", a.meta.dataset, b.meta.dataset, split.train.source());
        let tc = seeded(&cfg.retrain, seed);
        let (fused, mut metrics) = fusion_retrain(&a, &b, split, &tc, &opts).context("fusion retraining")?;
        metrics.extra.insert("plan_source".into(), json!(plan_source));

        let dir = layout.hybrid_dir(seed);
        let mut m = manifest(&layout, cfg, "fuse-retrain", seed, &dir)?;
        ctx.record_dataset(&mut m, &cfg.retrain_dataset)?;
        m.input("checkpoint_a", &path_a, ctx.hash(&path_a)?);
        m.input("checkpoint_b", &path_b, ctx.hash(&path_b)?);
        if let Some(p) = &cfg.fusion.plan {
            m.input("plan", p, ctx.hash(p)?);
        }
        m.output(&dir, PLAN_FILE, (fused.plan().to_json() + "\n").as_bytes())?;
        let model = Model::Fused(fused);
        let bytes = checkpoint_bytes(&model, split.train.source(), seed, metrics.final_test_accuracy, &resolved);
        m.output(&dir, CHECKPOINT_FILE, &bytes)?;
        m.output(&dir, METRICS_FILE, &metrics_bytes(&metrics))?;
        let param_hash = model.param_hash();
        m.notes.insert("param_hash".into(), json!(param_hash));
        m.notes.insert("plan_source".into(), json!(plan_source));
        m.notes.insert("freeze_backbones".into(), json!(tc.freeze_backbones));
        m.finish(&dir)?;
        Ok(RunOutcome { seed, side: None, dir, metrics, param_hash })
    })
}

/// Builds the table from existing metrics files and writes both copies
/// next to the seed directories.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<Comparison> {
    let errors = cfg.validate(Path::new("."), Needs::Compare);
    if !errors.is_empty() {
        return Err(CliError::Config(errors));
    }
    let layout = RunLayout::new(cfg);
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let paths = [
            layout.baseline_dir(seed, Side::A).join(METRICS_FILE),
            layout.baseline_dir(seed, Side::B).join(METRICS_FILE),
            layout.hybrid_dir(seed).join(METRICS_FILE),
        ];
        let absent: Vec<PathBuf> = paths.iter().filter(|p| !p.is_file()).cloned().collect();
        if !absent.is_empty() {
            missing.extend(absent);
            continue;
        }
        let load = |p: &PathBuf| MetricsRecord::load(p).with_context(|| format!("reading {}", p.display()));
        let (tl_a, tl_b, hybrid) = (load(&paths[0])?, load(&paths[1])?, load(&paths[2])?);
        for (p, r) in paths.iter().zip([&tl_a, &tl_b, &hybrid]) {
            r.check().map_err(|e| anyhow!("{}: {e}", p.display()))?;
        }
        rows.push(ComparisonRow::from_records(seed, &tl_a, &tl_b, &hybrid));
    }
    if !missing.is_empty() {
        return Err(anyhow::Error::new(MissingRuns(missing)).into());
    }
    let comparison = Comparison::new(&cfg.name, rows);
    write_file(&layout.root().join(COMPARISON_TEXT), comparison.to_text().as_bytes())?;
    write_file(&layout.root().join(COMPARISON_JSON), (comparison.to_json() + "\n").as_bytes())?;
    Ok(comparison)
}

/// Pretrain, baseline, fuse-retrain and compare in sequence.
pub fn cmd_run(cfg: &ExperimentConfig, ctx: &Context) -> Result<Comparison> {
    cmd_pretrain(cfg, ctx)?;
    cmd_baseline(cfg, ctx)?;
    cmd_fuse_retrain(cfg, ctx)?;
    cmd_compare(cfg)
}

pub fn cmd_check(level: CheckLevel) -> CheckReport {
    run_checks(level)
}

/// One line per check, without timings, so repeated runs print the same text.
pub fn format_report(report: &CheckReport) -> String {
    let width = report.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out: Vec<String> = report
        .results
        .iter()
        .map(|r| format!("{:<4}  {:<width$}  {}", if r.passed { "ok" } else { "FAIL" }, r.name, r.detail))
        .collect();
    let failed = report.failures().count();
    out.push(if failed == 0 {
        format!("all {} checks passed", report.results.len())
    } else {
        format!("{failed} of {} checks failed", report.results.len())
    });
    out.join("\n") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence() {
        let mut cfg: ExperimentConfig = serde_json::from_value(json!({
            "name": "t", "input": {"height": 8, "width": 8, "channels": 1},
            "model_a": "tiny-a", "model_b": "tiny-b",
            "retrain_dataset": {"kind": "bands", "classes": 2, "train_per_class": 4, "test_per_class": 2},
            "seeds": [1, 2, 3]
        }))
        .unwrap();
        Overrides { seed: Some(9), out: Some("elsewhere".into()), plan: Some("p.json".into()), freeze_backbones: true }
            .apply(&mut cfg);
        assert_eq!(cfg.seeds, [9]);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.fusion.plan, Some(PathBuf::from("p.json")));
        assert!(cfg.retrain.freeze_backbones);
        Overrides::default().apply(&mut cfg);
        assert!(cfg.retrain.freeze_backbones);
    }

    #[test]
    fn jobs_keep_order_and_report_errors() {
        let jobs: Vec<u32> = (0..10).collect();
        let out = run_jobs(&jobs, 3, |&j| Ok(j * 2)).unwrap();
        assert_eq!(out, (0..10).map(|j| j * 2).collect::<Vec<_>>());
        let err = run_jobs(&jobs, 3, |&j| if j == 4 { Err(CliError::config("x", "bad")) } else { Ok(j) });
        assert!(matches!(err, Err(CliError::Config(_))));
    }
}

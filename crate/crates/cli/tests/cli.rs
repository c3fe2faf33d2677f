//! The binary end to end on generated data: exit codes, run layout,
//! provenance records and flag handling.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fusionforge::runs::{blob_hash, RunManifest};
use fusionforge_core::fusion::FusionPlan;
use fusionforge_core::MetricsRecord;
use serde_json::{json, Value};

fn fusionforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionforge"))
        .args(args)
        .current_dir(dir)
        .env("FUSIONFORGE_DATA", dir.join("data"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn bands(classes: usize, train: usize, test: usize) -> Value {
    json!({"kind": "bands", "classes": classes, "train_per_class": train, "test_per_class": test})
}

fn experiment(name: &str) -> Value {
    json!({
        "name": name,
        "input": {"height": 12, "width": 12, "channels": 1},
        "model_a": "tiny-a",
        "model_b": "tiny-b",
        "pretrain_dataset_a": bands(4, 12, 4),
        "pretrain_dataset_b": bands(3, 12, 4),
        "retrain_dataset": bands(3, 10, 5),
        "pretrain": {"epochs": 1, "batch_size": 8},
        "retrain": {"epochs": 1, "batch_size": 8},
        "transfer_head": [8],
        "fusion": {"max_links": 2, "head_sizes": [8]},
        "output_dir": "runs",
        "seeds": [3, 4]
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("exp.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn metrics(path: PathBuf) -> MetricsRecord {
    MetricsRecord::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn manifest(dir: PathBuf) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_the_documented_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &experiment("e2e"));
    let out = fusionforge(tmp.path(), &["run", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Hybrid Learning Accuracy"), "{table}");
    assert!(table.contains("| mean |"), "{table}");

    let root = tmp.path().join("runs/e2e");
    for f in ["comparison.txt", "comparison.json"] {
        assert!(root.join(f).is_file(), "{f}");
    }
    for seed in ["3", "4"] {
        let s = root.join(seed);
        assert!(s.join("config.json").is_file());
        for phase in ["pretrain/a", "pretrain/b", "baseline/a", "baseline/b", "hybrid"] {
            for f in ["config.json", "model.ckpt", "metrics.json", "run.json"] {
                assert!(s.join(phase).join(f).is_file(), "{seed}/{phase}/{f}");
            }
        }
        assert!(s.join("hybrid/plan.json").is_file());

        // Baselines and hybrid share split and train config.
        let h = metrics(s.join("hybrid/metrics.json"));
        for side in ["a", "b"] {
            let b = metrics(s.join(format!("baseline/{side}/metrics.json")));
            assert_eq!(b.split_hash, h.split_hash);
            assert_eq!(b.config_hash, h.config_hash);
        }
        assert_eq!(h.seed.to_string(), seed);

        // Every recorded output hash matches the file on disk.
        let m = manifest(s.join("hybrid"));
        assert_eq!(m.command, "fuse-retrain");
        for (name, hash) in &m.outputs {
            assert_eq!(&blob_hash(&fs::read(s.join("hybrid").join(name)).unwrap()), hash, "{name}");
        }
        assert!(m.inputs.contains_key("checkpoint_a") && m.inputs.contains_key("checkpoint_b"));
        assert_eq!(m.notes["plan_source"], "auto");
    }
}

#[test]
fn rerun_reproduces_metrics_and_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = experiment("again");
    cfg["seeds"] = json!([9]);
    let path = write_config(tmp.path(), &cfg);
    let p = path.to_str().unwrap();
    let mut seen = Vec::new();
    for out in ["one", "two"] {
        for cmd in ["pretrain", "fuse-retrain"] {
            let o = fusionforge(tmp.path(), &[cmd, "--config", p, "--out", out]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
        let dir = tmp.path().join(out).join("again/9/hybrid");
        seen.push((metrics(dir.join("metrics.json")), manifest(dir)));
    }
    assert!(seen[0].0.same_outcome(&seen[1].0));
    assert_eq!(seen[0].1.notes["param_hash"], seen[1].1.notes["param_hash"]);
    assert_eq!(seen[0].1.outputs["plan.json"], seen[1].1.outputs["plan.json"]);
}

#[test]
fn seed_flag_and_jobs_select_and_parallelize() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &experiment("par"));
    let p = path.to_str().unwrap();
    let o = fusionforge(tmp.path(), &["pretrain", "--config", p, "--seed", "4", "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("runs/par/4/pretrain/b/model.ckpt").is_file());
    assert!(!tmp.path().join("runs/par/3").exists());

    // The same job run sequentially gives the same model.
    let o = fusionforge(tmp.path(), &["pretrain", "--config", p, "--seed", "4", "--out", "seq"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let par = manifest(tmp.path().join("runs/par/4/pretrain/b"));
    let seq = manifest(tmp.path().join("seq/par/4/pretrain/b"));
    assert_eq!(par.notes["param_hash"], seq.notes["param_hash"]);
}

#[test]
fn freeze_flag_and_fixed_plan_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = experiment("flags");
    cfg["seeds"] = json!([1]);
    let path = write_config(tmp.path(), &cfg);
    let p = path.to_str().unwrap();
    assert!(fusionforge(tmp.path(), &["pretrain", "--config", p]).status.success());
    let o = fusionforge(tmp.path(), &["fuse-retrain", "--config", p]);
    assert!(o.status.success(), "{}", stderr(&o));

    // Keep only the first link of the automatic plan and feed it back.
    let hybrid = tmp.path().join("runs/flags/1/hybrid");
    let mut plan = FusionPlan::from_json(&fs::read_to_string(hybrid.join("plan.json")).unwrap()).unwrap();
    plan.links.truncate(1);
    plan.one_way = true;
    fs::write(tmp.path().join("one.json"), plan.to_json()).unwrap();

    let o = fusionforge(tmp.path(), &["fuse-retrain", "--config", p, "--plan", "one.json", "--freeze-backbones"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(hybrid.clone());
    assert_eq!(m.notes["freeze_backbones"], true);
    assert_eq!(m.notes["plan_source"], "one.json");
    assert!(m.inputs.contains_key("plan"));
    let used = FusionPlan::from_json(&fs::read_to_string(hybrid.join("plan.json")).unwrap()).unwrap();
    assert_eq!(used.links, plan.links);
    let record = metrics(hybrid.join("metrics.json"));
    assert!(record.config.freeze_backbones);
    assert_eq!(record.extra["plan_source"], "one.json");
    // The per-seed config written alongside reflects the flags.
    let written: Value = serde_json::from_str(&fs::read_to_string(hybrid.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["retrain"]["freeze_backbones"], true);
    assert_eq!(written["fusion"]["plan"], "one.json");
}

#[test]
fn identical_backbones_need_no_adapters() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = experiment("twins");
    cfg["model_b"] = json!("tiny-a");
    cfg["pretrain_dataset_b"] = bands(4, 12, 4);
    cfg["seeds"] = json!([2]);
    let path = write_config(tmp.path(), &cfg);
    let p = path.to_str().unwrap();
    for cmd in ["pretrain", "fuse-retrain"] {
        let o = fusionforge(tmp.path(), &[cmd, "--config", p]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let plan =
        FusionPlan::from_json(&fs::read_to_string(tmp.path().join("runs/twins/2/hybrid/plan.json")).unwrap()).unwrap();
    assert!(!plan.links.is_empty());
    assert!(plan.links.iter().all(|l| !l.adapter.needed));
}

#[test]
fn missing_dataset_is_a_config_error_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = experiment("nodata");
    cfg["retrain_dataset"] = json!({"kind": "mnist"});
    let path = write_config(tmp.path(), &cfg);
    let o = fusionforge(tmp.path(), &["baseline", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("retrain_dataset.path"), "{}", stderr(&o));
    assert!(!tmp.path().join("runs").exists(), "nothing is written before validation passes");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bad = experiment("bad");
    bad["surprise"] = json!(1);
    let path = write_config(tmp.path(), &bad);
    let o = fusionforge(tmp.path(), &["pretrain", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("surprise"), "{}", stderr(&o));

    let mut bad = experiment("bad");
    bad["retrain"]["learning_rate"] = json!(0.0);
    bad["seeds"] = json!([]);
    let path = write_config(tmp.path(), &bad);
    let o = fusionforge(tmp.path(), &["fuse-retrain", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("seeds") && err.contains("retrain"), "{err}");

    let o = fusionforge(tmp.path(), &["pretrain", "--config", "absent.json"]);
    assert_eq!(o.status.code(), Some(2));
    let o = fusionforge(tmp.path(), &["pretrain", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));

    let path = write_config(tmp.path(), &experiment("ok"));
    fs::write(tmp.path().join("broken.json"), "{\"links\": 3}").unwrap();
    let o = fusionforge(tmp.path(), &["fuse-retrain", "--config", path.to_str().unwrap(), "--plan", "broken.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fusion.plan"), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &experiment("early"));
    let p = path.to_str().unwrap();
    // No pretrained checkpoints yet.
    let o = fusionforge(tmp.path(), &["fuse-retrain", "--config", p]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fusionforge pretrain"), "{}", stderr(&o));
    // Nothing to compare yet; every missing file is listed.
    let o = fusionforge(tmp.path(), &["compare", "--config", p]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("6 run(s) missing"), "{}", stderr(&o));
}

#[test]
fn quick_check_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let first = fusionforge(tmp.path(), &["check", "quick"]);
    let second = fusionforge(tmp.path(), &["check"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stdout));
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.contains("isolation") && text.lines().last().unwrap().starts_with("all "), "{text}");
}

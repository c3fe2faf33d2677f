//! Run-directory layout and input provenance.
//!
//! ```text
//! <output_dir>/<name>/
//!   comparison.txt, comparison.json
//!   <seed>/
//!     config.json                  effective config, seeds = [seed]
//!     pretrain/{a,b}/              model.ckpt, metrics.json, run.json
//!     baseline/{a,b}/              model.ckpt, metrics.json, run.json
//!     hybrid/                      plan.json, model.ckpt, metrics.json, run.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Side};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "run.json";
pub const PLAN_FILE: &str = "plan.json";
pub const COMPARISON_TEXT: &str = "comparison.txt";
pub const COMPARISON_JSON: &str = "comparison.json";

#[derive(Debug, Clone)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        RunLayout { root: cfg.output_dir.join(&cfg.name) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(seed.to_string())
    }

    pub fn pretrain_dir(&self, seed: u64, side: Side) -> PathBuf {
        self.seed_dir(seed).join("pretrain").join(side.dir_name())
    }

    pub fn baseline_dir(&self, seed: u64, side: Side) -> PathBuf {
        self.seed_dir(seed).join("baseline").join(side.dir_name())
    }

    pub fn hybrid_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("hybrid")
    }

    /// Writes `config.json` for the seed: the effective config narrowed to
    /// this seed, so `--config <seed dir>/config.json` re-runs it.
    pub fn write_config(&self, cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<()> {
        let mut one = cfg.clone();
        one.seeds = vec![seed];
        write_file(&self.seed_dir(seed).join(CONFIG_FILE), (one.to_json() + "\n").as_bytes())
    }
}

/// Writes through a uniquely named temporary sibling and renames, creating
/// parents. Concurrent writers of the same file each land a whole copy.
pub fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.{n}.tmp", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Git-style object hash: SHA-256 over `blob <len>\0<content>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    sha256_hex(&[format!("blob {}\0", bytes.len()).as_bytes(), bytes])
}

/// Blob hash of a file, or for a directory a tree hash over its entries'
/// relative names and hashes in sorted order.
pub fn path_hash(path: &Path) -> anyhow::Result<String> {
    let meta = fs::metadata(path).with_context(|| format!("hashing {}", path.display()))?;
    if meta.is_file() {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(blob_hash(&bytes));
    }
    let mut entries: Vec<_> = fs::read_dir(path)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    let mut listing = Vec::new();
    for e in entries {
        let hash = path_hash(&e.path())?;
        listing.extend_from_slice(e.file_name().to_string_lossy().as_bytes());
        listing.push(0);
        listing.extend_from_slice(hash.as_bytes());
        listing.push(b'\n');
    }
    Ok(sha256_hex(&[format!("tree {}\0", listing.len()).as_bytes(), &listing]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub hash: String,
}

/// `run.json`: what a command consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Blob hash of the seed's `config.json`.
    pub config_hash: String,
    /// Role → file or directory hash.
    pub inputs: BTreeMap<String, InputRecord>,
    /// Hash over the config hash and every input, in role order.
    pub input_hash: String,
    /// Output file name → blob hash.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_json: &[u8]) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            config_hash: blob_hash(config_json),
            inputs: BTreeMap::new(),
            input_hash: String::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path, hash: String) {
        self.inputs.insert(role.to_string(), InputRecord { path: path.to_path_buf(), hash });
    }

    /// Writes `bytes` into `dir/name` and records its hash.
    pub fn output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        write_file(&dir.join(name), bytes)?;
        self.outputs.insert(name.to_string(), blob_hash(bytes));
        Ok(())
    }

    pub fn finish(mut self, dir: &Path) -> anyhow::Result<Self> {
        let mut parts: Vec<Vec<u8>> = vec![self.config_hash.clone().into_bytes()];
        for (role, rec) in &self.inputs {
            parts.push(format!("{role}\0{}\n", rec.hash).into_bytes());
        }
        self.input_hash = sha256_hex(&parts.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let text = serde_json::to_string_pretty(&self)? + "\n";
        write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(self)
    }
}

//! The checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TFLC"                      magic
//! u32                         format version
//! u32 + UTF-8 JSON            architecture (single network or fused pair)
//! f32 × n                     every stored value in declaration order
//! u32 + UTF-8 JSON            metadata
//! ```
//!
//! Blob sizes are not stored: they follow from the architecture, and a
//! file whose remaining length disagrees is rejected before anything is
//! allocated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ChannelStats;
use crate::fusion::{FusedNetwork, FusionError};
use crate::model::{Model, ModelArchitecture};
use crate::nn::{NetworkError, NetworkGraph, MAX_ARCH_DIM};

pub const MAGIC: [u8; 4] = *b"TFLC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated {section}: need {expected} bytes, {available} available")]
    Truncated { section: &'static str, expected: usize, available: usize },
    #[error("architecture section: {0}")]
    Architecture(String),
    #[error("parameter blobs: architecture needs {expected} values, file holds at most {available}")]
    BlobLength { expected: usize, available: usize },
    #[error("metadata section: {0}")]
    Metadata(String),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

impl From<NetworkError> for CheckpointError {
    fn from(e: NetworkError) -> Self {
        CheckpointError::Architecture(e.to_string())
    }
}

impl From<FusionError> for CheckpointError {
    fn from(e: FusionError) -> Self {
        CheckpointError::Architecture(e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Dataset the parameters were last trained on.
    pub dataset: String,
    pub seed: u64,
    #[serde(default)]
    pub final_accuracy: Option<f64>,
    /// Seconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
    /// Input standardization applied during training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<ChannelStats>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    /// Current time, or `SOURCE_DATE_EPOCH` when set, for reproducible files.
    pub fn now() -> u64 {
        if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
            return t;
        }
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub model: Model,
    pub meta: CheckpointMeta,
}

pub fn encode(model: &Model, meta: &CheckpointMeta) -> Vec<u8> {
    let arch = serde_json::to_vec(&model.architecture()).expect("architecture serializes");
    let meta = serde_json::to_vec(meta).expect("metadata serializes");
    let storage = model.storage();
    let values: usize = storage.iter().map(|(_, v)| v.len()).sum();
    let mut out = Vec::with_capacity(16 + arch.len() + meta.len() + 4 * values);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    for (_, block) in storage {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.remaining() < n {
            return Err(CheckpointError::Truncated { section, expected: n, available: self.remaining() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Builds the model skeleton, refusing anything larger than `available`
/// stored values before allocating it.
fn skeleton(arch: &ModelArchitecture, available: usize) -> Result<Model, CheckpointError> {
    let check = |expected: usize| {
        if expected > available {
            Err(CheckpointError::BlobLength { expected, available })
        } else {
            Ok(())
        }
    };
    match arch {
        ModelArchitecture::Single(a) => {
            check(NetworkGraph::<f32>::storage_len(a)?)?;
            Ok(Model::Single(NetworkGraph::build(a.clone())?))
        }
        ModelArchitecture::Fused(f) => {
            let overflow = || CheckpointError::Architecture("parameter count overflows".into());
            let backbones = NetworkGraph::<f32>::storage_len(&f.a)?
                .checked_add(NetworkGraph::<f32>::storage_len(&f.b)?)
                .ok_or_else(overflow)?;
            check(backbones)?;
            let head = f.plan.head.as_ref().ok_or_else(|| CheckpointError::Architecture("plan has no head".into()))?;
            let sizes: Vec<usize> = head.hidden.iter().copied().chain([head.num_classes]).collect();
            if sizes.iter().any(|&u| u == 0 || u > MAX_ARCH_DIM) {
                return Err(CheckpointError::Architecture("head sizes out of range".into()));
            }
            let features = NetworkGraph::<f32>::static_feature_dim(&f.a)?
                .unwrap_or(0)
                .checked_add(NetworkGraph::<f32>::static_feature_dim(&f.b)?.unwrap_or(0))
                .ok_or_else(overflow)?;
            let mut total = backbones;
            let mut width = features;
            for u in sizes {
                let layer = width.checked_mul(u).and_then(|w| w.checked_add(u)).ok_or_else(overflow)?;
                total = total.checked_add(layer).ok_or_else(overflow)?;
                width = u;
            }
            for l in f.plan.links.iter().filter(|l| l.adapter.needed) {
                let a = &l.adapter;
                if [a.kernel_size, a.in_channels, a.out_channels].iter().any(|&v| v > MAX_ARCH_DIM) {
                    return Err(CheckpointError::Architecture("adapter sizes out of range".into()));
                }
                let n = (a.kernel_size * a.kernel_size)
                    .checked_mul(a.in_channels * a.out_channels)
                    .and_then(|n| n.checked_add(a.out_channels))
                    .ok_or_else(overflow)?;
                total = total.checked_add(n).ok_or_else(overflow)?;
            }
            check(total)?;
            let fused = FusedNetwork::from_architecture(f)?;
            Ok(Model::Fused(fused))
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| CheckpointError::BadMagic(bytes.iter().take(4).copied().collect()))?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let n = r.u32("architecture length")? as usize;
    let arch_bytes = r.take(n, "architecture")?;
    let arch: ModelArchitecture =
        serde_json::from_slice(arch_bytes).map_err(|e| CheckpointError::Architecture(e.to_string()))?;

    // The trailing metadata length field needs at least 4 bytes.
    let available = r.remaining().saturating_sub(4) / 4;
    let mut model = skeleton(&arch, available)?;
    for block in model.storage_mut() {
        let raw = r.take(4 * block.len(), "parameter blobs")?;
        for (v, b) in block.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    model.mark_initialized();

    let n = r.u32("metadata length")? as usize;
    let meta_bytes = r.take(n, "metadata")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    if r.remaining() > 0 {
        return Err(CheckpointError::TrailingBytes(r.remaining()));
    }
    Ok(Checkpoint { version, model, meta })
}

/// Writes through a temporary file and renames it into place.
pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(model, meta)).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

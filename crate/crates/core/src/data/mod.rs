//! Dataset loaders and preprocessing.
//!
//! Every loader produces a [`LabeledDataset`] of NHWC `f32` images with
//! pixels in `[0, 1]`. Parsers work on byte slices so malformed inputs can
//! be exercised without touching the filesystem; they return typed errors
//! and never panic on bad input.

mod cifar;
mod dataset;
mod folder;
mod idx;
mod transform;

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub use cifar::{load_cifar100, parse_cifar100, LabelKind, CIFAR_RECORD_LEN};
pub use dataset::{LabeledDataset, SplitPair};
pub use folder::{load_image_folder, FolderLoad, SkippedFile};
pub use idx::{load_mnist_idx, parse_idx_images, parse_idx_labels, IdxImages, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use transform::{
    normalize_standard, resize_bilinear, resize_dataset, split_80_20, to_rgb, ChannelStats, STD_EPSILON,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{what}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { what: &'static str, expected: u32, found: u32 },
    #[error("{what}: truncated, expected {expected} bytes, found {actual}")]
    Truncated { what: &'static str, expected: usize, actual: usize },
    #[error("{what}: {extra} unexpected trailing bytes")]
    TrailingBytes { what: &'static str, extra: usize },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("file length {len} is not a multiple of the {record}-byte record size")]
    Framing { len: usize, record: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class directory {0} holds no images")]
    EmptyClass(PathBuf),
    #[error("{0} contains no class directories")]
    NoClasses(PathBuf),
    #[error("class `{class}` has {count} samples, needs at least {needed}")]
    TooFewSamples { class: String, count: usize, needed: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

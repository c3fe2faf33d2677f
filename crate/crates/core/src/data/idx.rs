//! MNIST IDX files: a big-endian header (magic, item count, then rows and
//! columns for images) followed by one unsigned byte per pixel or label.

use std::path::Path;

use crate::data::{read_file, DataError, LabeledDataset};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, DataError> {
    let b = bytes.get(at..at + 4).ok_or(DataError::Truncated { what, expected: at + 4, actual: bytes.len() })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32, what: &'static str) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(DataError::BadMagic { what, expected, found });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], header: usize, items: usize, what: &'static str) -> Result<&'a [u8], DataError> {
    let expected =
        header.checked_add(items).ok_or(DataError::Truncated { what, expected: usize::MAX, actual: bytes.len() })?;
    match bytes.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(DataError::Truncated { what, expected, actual: bytes.len() }),
        std::cmp::Ordering::Greater => Err(DataError::TrailingBytes { what, extra: bytes.len() - expected }),
        std::cmp::Ordering::Equal => Ok(&bytes[header..]),
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    const WHAT: &str = "idx images";
    check_magic(bytes, IDX_IMAGES_MAGIC, WHAT)?;
    let count = be_u32(bytes, 4, WHAT)? as usize;
    let rows = be_u32(bytes, 8, WHAT)? as usize;
    let cols = be_u32(bytes, 12, WHAT)? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::Invalid(format!("{WHAT}: zero image size {rows}×{cols}")));
    }
    let n = count.checked_mul(rows).and_then(|v| v.checked_mul(cols)).ok_or(DataError::Truncated {
        what: WHAT,
        expected: usize::MAX,
        actual: bytes.len(),
    })?;
    let pixels = body(bytes, 16, n, WHAT)?.to_vec();
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    const WHAT: &str = "idx labels";
    check_magic(bytes, IDX_LABELS_MAGIC, WHAT)?;
    let count = be_u32(bytes, 4, WHAT)? as usize;
    Ok(body(bytes, 8, count, WHAT)?.to_vec())
}

/// Builds a single-channel dataset with pixels scaled to `[0, 1]`.
pub(crate) fn mnist_from_bytes(images: &[u8], labels: &[u8]) -> Result<LabeledDataset, DataError> {
    let img = parse_idx_images(images)?;
    let lab = parse_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(DataError::CountMismatch { images: img.count, labels: lab.len() });
    }
    if img.count == 0 {
        return Err(DataError::Invalid("idx files hold no samples".into()));
    }
    let data = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::new(vec![img.count, img.rows, img.cols, 1], data)?;
    let labels = lab.into_iter().map(usize::from).collect();
    let names = (0..MNIST_CLASSES).map(|d| d.to_string()).collect();
    LabeledDataset::new(images, labels, names, "mnist", None)
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, DataError> {
    mnist_from_bytes(&read_file(images_path)?, &read_file(labels_path)?)
}

//! CIFAR-100 binary files: fixed 3074-byte records of a coarse label byte,
//! a fine label byte and 3072 pixel bytes stored channel-planar (1024 red,
//! then 1024 green, then 1024 blue, each 32×32 row-major).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_file, DataError, LabeledDataset};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_LEN: usize = 3074;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// 100 classes.
    #[default]
    Fine,
    /// 20 superclasses.
    Coarse,
}

impl LabelKind {
    pub fn classes(self) -> usize {
        match self {
            LabelKind::Fine => 100,
            LabelKind::Coarse => 20,
        }
    }

    fn names_file(self) -> &'static str {
        match self {
            LabelKind::Fine => "fine_label_names.txt",
            LabelKind::Coarse => "coarse_label_names.txt",
        }
    }
}

/// Parses records into `[N, 32, 32, 3]` with pixels in `[0, 1]`.
pub fn parse_cifar100(bytes: &[u8], kind: LabelKind, class_names: Vec<String>) -> Result<LabeledDataset, DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(DataError::Framing { len: bytes.len(), record: CIFAR_RECORD_LEN });
    }
    let classes = kind.classes();
    if class_names.len() != classes {
        return Err(DataError::Invalid(format!("{} class names for {classes} classes", class_names.len())));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PLANE * 3);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        let label = match kind {
            LabelKind::Coarse => rec[0],
            LabelKind::Fine => rec[1],
        } as usize;
        if label >= classes {
            return Err(DataError::LabelOutOfRange { label, classes });
        }
        labels.push(label);
        let px = &rec[2..];
        for i in 0..PLANE {
            for c in 0..3 {
                data.push(px[c * PLANE + i] as f32 / 255.0);
            }
        }
    }
    let images = Tensor::new(vec![n, SIDE, SIDE, 3], data)?;
    LabeledDataset::new(images, labels, class_names, "cifar100", None)
}

/// Loads a CIFAR-100 `.bin` file. Class names come from the
/// `fine_label_names.txt` / `coarse_label_names.txt` file shipped next to
/// it when present, otherwise they are numbered.
pub fn load_cifar100(bin_path: &Path, kind: LabelKind) -> Result<LabeledDataset, DataError> {
    let bytes = read_file(bin_path)?;
    let names_path = bin_path.with_file_name(kind.names_file());
    let names = match std::fs::read_to_string(&names_path) {
        Ok(text) => {
            let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            if names.len() != kind.classes() {
                log::warn!(
                    "{} lists {} names, expected {}; numbering classes",
                    names_path.display(),
                    names.len(),
                    kind.classes()
                );
                numbered(kind)
            } else {
                names
            }
        }
        Err(_) => numbered(kind),
    };
    parse_cifar100(&bytes, kind, names)
}

fn numbered(kind: LabelKind) -> Vec<String> {
    let tag = match kind {
        LabelKind::Fine => "fine",
        LabelKind::Coarse => "coarse",
    };
    (0..kind.classes()).map(|i| format!("{tag}_{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_length_is_a_framing_error() {
        let r = parse_cifar100(&[0; 3073], LabelKind::Fine, numbered(LabelKind::Fine));
        assert!(matches!(r, Err(DataError::Framing { len: 3073, .. })));
    }

    #[test]
    fn coarse_label_range() {
        let mut rec = vec![0u8; CIFAR_RECORD_LEN];
        rec[0] = 20;
        let r = parse_cifar100(&rec, LabelKind::Coarse, numbered(LabelKind::Coarse));
        assert!(matches!(r, Err(DataError::LabelOutOfRange { label: 20, classes: 20 })));
    }
}

//! Turns a [`DatasetSpec`] into the train/test split a run consumes.
//!
//! Per side the steps are: class selection, range slice, stratified
//! subset, channel conversion, resize. Standardization, when requested,
//! runs last on the finished split using train statistics only.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::Context;
use fusionforge_core::data::{
    load_cifar100, load_image_folder, load_mnist_idx, normalize_standard, resize_dataset, split_80_20, to_rgb,
    ChannelStats, LabeledDataset, SplitPair,
};
use fusionforge_core::rng::SeededRng;
use fusionforge_core::{FeatureShape, Tensor};

use crate::config::{ClassSelect, DatasetKind, DatasetSpec, MNIST_FILES};
use crate::error::{CliError, Result};

pub const DATA_ENV: &str = "FUSIONFORGE_DATA";

/// `FUSIONFORGE_DATA`, or `data/` under the working directory.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

pub struct Resolved {
    pub split: SplitPair,
    pub stats: Option<ChannelStats>,
}

/// Decoded source files, before any per-run selection.
struct Raw {
    train: LabeledDataset,
    /// Absent for folder datasets, which are split per seed.
    test: Option<LabeledDataset>,
}

/// Loads each source at most once per process; shared across jobs.
pub struct DataCache {
    root: PathBuf,
    raw: Mutex<HashMap<String, Arc<Raw>>>,
}

impl DataCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataCache { root: root.into(), raw: Mutex::new(HashMap::new()) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn raw(&self, spec: &DatasetSpec, input: FeatureShape) -> Result<Arc<Raw>> {
        let dir = spec.resolved_path(&self.root);
        let mut key = format!("{:?}|{dir:?}|{:?}|{input}", spec.kind, spec.cifar_labels);
        if spec.kind == DatasetKind::Bands {
            // Generated data depends on the selection itself.
            key += &format!("|{:?}|{:?}|{:?}", spec.classes, spec.train_per_class, spec.test_per_class);
        }
        let mut cache = self.raw.lock().expect("data cache lock");
        if let Some(raw) = cache.get(&key) {
            return Ok(raw.clone());
        }
        let raw = Arc::new(load_raw(spec, dir.as_deref(), input)?);
        cache.insert(key, raw.clone());
        Ok(raw)
    }

    pub fn resolve(&self, spec: &DatasetSpec, field: &str, input: FeatureShape, seed: u64) -> Result<Resolved> {
        let raw = self.raw(spec, input)?;
        let (train, test) = match &raw.test {
            Some(test) => (raw.train.clone(), test.clone()),
            None if spec.kind == DatasetKind::Bands => unreachable!("bands always has a test side"),
            None => {
                let split = split_80_20(&raw.train, seed).map_err(|e| CliError::config(field, e.to_string()))?;
                (split.train, split.test)
            }
        };
        let name = spec.display_name();
        let bands = spec.kind == DatasetKind::Bands;
        let side = |ds: LabeledDataset, range: Option<[usize; 2]>, per_class: Option<usize>, which: &str| {
            let ds = select_classes(ds, spec.classes.as_ref(), field)?;
            let ds = match range {
                Some([a, b]) if b > ds.len() => {
                    return Err(CliError::config(
                        format!("{field}.{which}_range"),
                        format!("[{a}, {b}) exceeds the {} samples available", ds.len()),
                    ))
                }
                Some([a, b]) => ds.subset(&(a..b).collect::<Vec<_>>()).map_err(anyhow::Error::from)?,
                None => ds,
            };
            let ds = match per_class {
                Some(n) if !bands => ds
                    .stratified_subset(n, seed)
                    .map_err(|e| CliError::config(format!("{field}.{which}_per_class"), e.to_string()))?,
                _ => ds,
            };
            conform(ds, input, field).map(|ds| ds.with_source(name.clone()))
        };
        let train = side(train, spec.train_range, spec.train_per_class, "train")?;
        let test = side(test, spec.test_range, spec.test_per_class, "test")?;
        let split = SplitPair::new(train, test, seed).map_err(anyhow::Error::from)?;
        if spec.standardize {
            let (split, stats) = normalize_standard(&split).map_err(anyhow::Error::from)?;
            return Ok(Resolved { split, stats: Some(stats) });
        }
        Ok(Resolved { split, stats: None })
    }
}

fn load_raw(spec: &DatasetSpec, dir: Option<&Path>, input: FeatureShape) -> Result<Raw> {
    let dir = || dir.expect("file-backed kinds have a path");
    let raw = match spec.kind {
        DatasetKind::Mnist => {
            let d = dir();
            let train = load_mnist_idx(&d.join(MNIST_FILES[0]), &d.join(MNIST_FILES[1]))
                .with_context(|| format!("loading MNIST from {}", d.display()))?;
            let test = load_mnist_idx(&d.join(MNIST_FILES[2]), &d.join(MNIST_FILES[3]))
                .with_context(|| format!("loading MNIST from {}", d.display()))?;
            let offset = train.len() as u64;
            Raw { train, test: Some(test.with_id_offset(offset)) }
        }
        DatasetKind::Cifar100 => {
            let d = dir();
            let train = load_cifar100(&d.join("train.bin"), spec.cifar_labels)
                .with_context(|| format!("loading CIFAR-100 from {}", d.display()))?;
            let test = load_cifar100(&d.join("test.bin"), spec.cifar_labels)
                .with_context(|| format!("loading CIFAR-100 from {}", d.display()))?;
            let offset = train.len() as u64;
            Raw { train, test: Some(test.with_id_offset(offset)) }
        }
        DatasetKind::ImageFolder => {
            let d = dir();
            let load = load_image_folder(d, input.height, input.width)
                .with_context(|| format!("loading image folder {}", d.display()))?;
            if !load.skipped.is_empty() {
                log::warn!("{}: {} files could not be decoded", d.display(), load.skipped.len());
            }
            Raw { train: load.dataset, test: None }
        }
        DatasetKind::Bands => {
            let Some(ClassSelect::First(classes)) = spec.classes else {
                return Err(CliError::config("classes", "bands needs a class count"));
            };
            let (tr, te) = (spec.train_per_class.unwrap_or(1), spec.test_per_class.unwrap_or(1));
            let train = bands(classes, tr, input, 0, "bands-train")?;
            let test = bands(classes, te, input, (classes * tr) as u64, "bands-test")?;
            Raw { train, test: Some(test) }
        }
    };
    Ok(raw)
}

/// Class `k` of `classes` lights the k-th horizontal band on a noisy
/// background. Independent of the run seed, like a file-backed dataset.
pub fn bands(
    classes: usize,
    per_class: usize,
    shape: FeatureShape,
    first_id: u64,
    stream: &str,
) -> Result<LabeledDataset> {
    if classes > shape.height {
        return Err(CliError::config("classes", format!("{classes} bands do not fit in {} rows", shape.height)));
    }
    let mut rng = SeededRng::derive(classes as u64, stream);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * shape.numel());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let (lo, hi) = (label * shape.height / classes, (label + 1) * shape.height / classes);
        for y in 0..shape.height {
            for _ in 0..shape.width * shape.channels {
                let base = if (lo..hi).contains(&y) { 0.7 } else { 0.0 };
                data.push((base + 0.3 * rng.uniform()) as f32);
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(shape.with_batch(n).to_vec(), data).map_err(anyhow::Error::from)?;
    let names = (0..classes).map(|c| format!("band{c}")).collect();
    let ids = (first_id..first_id + n as u64).collect();
    Ok(LabeledDataset::new(images, labels, names, "bands", Some(ids)).map_err(anyhow::Error::from)?)
}

fn select_classes(ds: LabeledDataset, select: Option<&ClassSelect>, field: &str) -> Result<LabeledDataset> {
    let field = format!("{field}.classes");
    let indices: Vec<usize> = match select {
        None => return Ok(ds),
        Some(ClassSelect::First(k)) if *k == ds.num_classes() => return Ok(ds),
        Some(ClassSelect::First(k)) if *k > ds.num_classes() => {
            return Err(CliError::config(field, format!("asks for {k} classes, dataset has {}", ds.num_classes())))
        }
        Some(ClassSelect::First(k)) => (0..*k).collect(),
        Some(ClassSelect::Indices(v)) => v.clone(),
        Some(ClassSelect::Names(names)) => names
            .iter()
            .map(|n| {
                ds.class_names().iter().position(|c| c == n).ok_or_else(|| {
                    CliError::config(&field, format!("no class named `{n}` (have {:?})", ds.class_names()))
                })
            })
            .collect::<Result<_>>()?,
    };
    ds.select_classes(&indices).map_err(|e| CliError::config(field, e.to_string()))
}

fn conform(ds: LabeledDataset, input: FeatureShape, field: &str) -> Result<LabeledDataset> {
    let have = ds.sample_shape();
    let ds = match (have.channels, input.channels) {
        (a, b) if a == b => ds,
        (1, 3) => to_rgb(&ds).map_err(anyhow::Error::from)?,
        (a, b) => {
            return Err(CliError::config(field, format!("cannot convert {a}-channel images to {b} channels")));
        }
    };
    if have.height == input.height && have.width == input.width {
        return Ok(ds);
    }
    Ok(resize_dataset(&ds, input.height, input.width).map_err(anyhow::Error::from)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bands_spec(classes: usize) -> DatasetSpec {
        let mut spec = DatasetSpec::new(DatasetKind::Bands);
        spec.classes = Some(ClassSelect::First(classes));
        spec.train_per_class = Some(6);
        spec.test_per_class = Some(3);
        spec
    }

    #[test]
    fn bands_are_stable_and_disjoint() {
        let cache = DataCache::new("/nonexistent");
        let shape = FeatureShape::new(8, 8, 1);
        let a = cache.resolve(&bands_spec(4), "d", shape, 1).unwrap();
        let b = cache.resolve(&bands_spec(4), "d", shape, 2).unwrap();
        assert_eq!(a.split.train, b.split.train);
        assert_eq!((a.split.train.len(), a.split.test.len()), (24, 12));
        assert_eq!(a.split.train.source(), "Bands");
    }

    #[test]
    fn conversion_and_ranges() {
        let cache = DataCache::new("/nonexistent");
        let mut spec = bands_spec(2);
        spec.train_range = Some([2, 10]);
        spec.standardize = true;
        let r = cache.resolve(&spec, "d", FeatureShape::new(4, 6, 3), 0).unwrap();
        assert_eq!(r.split.train.len(), 8);
        assert_eq!(r.split.train.ids()[0], 2);
        assert_eq!(r.stats.unwrap().mean.len(), 3);

        spec.train_range = Some([0, 100]);
        let err = cache.resolve(&spec, "d", FeatureShape::new(4, 6, 3), 0).err().unwrap();
        assert!(matches!(err, CliError::Config(ref v) if v[0].field == "d.train_range"), "{err}");
    }

    #[test]
    fn class_selection_by_name() {
        let ds = bands(3, 2, FeatureShape::new(6, 2, 1), 0, "t").unwrap();
        let picked =
            select_classes(ds.clone(), Some(&ClassSelect::Names(vec!["band2".into(), "band0".into()])), "d").unwrap();
        assert_eq!(picked.class_names(), &["band2".to_string(), "band0".to_string()]);
        assert_eq!(picked.labels(), &[1, 0, 1, 0]);
        assert!(select_classes(ds, Some(&ClassSelect::Names(vec!["cat".into()])), "d").is_err());
    }
}

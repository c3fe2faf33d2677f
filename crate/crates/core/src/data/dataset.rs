use std::collections::HashSet;

use sha2::{Digest, Sha256};

use crate::data::DataError;
use crate::geometry::FeatureShape;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Images `[N, H, W, C]` with integer labels, class names, a source tag and
/// stable per-sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
    source: String,
    ids: Vec<u64>,
}

impl LabeledDataset {
    /// Ids default to `0..N`.
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        source: impl Into<String>,
        ids: Option<Vec<u64>>,
    ) -> Result<Self, DataError> {
        if images.rank() != 4 {
            return Err(DataError::Invalid(format!("images must be [N, H, W, C], got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(DataError::CountMismatch { images: n, labels: labels.len() });
        }
        if class_names.is_empty() {
            return Err(DataError::Invalid("dataset needs at least one class".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DataError::LabelOutOfRange { label: bad, classes: class_names.len() });
        }
        let ids = ids.unwrap_or_else(|| (0..n as u64).collect());
        if ids.len() != n {
            return Err(DataError::Invalid(format!("{} ids for {n} samples", ids.len())));
        }
        if ids.iter().collect::<HashSet<_>>().len() != n {
            return Err(DataError::Invalid("sample ids are not unique".into()));
        }
        Ok(LabeledDataset { images, labels, class_names, source: source.into(), ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> FeatureShape {
        let s = self.images.shape();
        FeatureShape::new(s[1], s[2], s[3])
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Shifts every id by `offset`, e.g. to keep a test file's ids apart
    /// from its train file's.
    pub fn with_id_offset(mut self, offset: u64) -> Self {
        self.ids.iter_mut().for_each(|i| *i += offset);
        self
    }

    /// Same samples with transformed images (the batch size must match).
    pub(crate) fn with_images(&self, images: Tensor) -> Self {
        debug_assert_eq!(images.shape()[0], self.len());
        LabeledDataset {
            images,
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            source: self.source.clone(),
            ids: self.ids.clone(),
        }
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>), DataError> {
        let images = self.images.gather_outer(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        if indices.is_empty() {
            return Err(DataError::Invalid("empty subset".into()));
        }
        let (images, labels) = self.batch(indices)?;
        Ok(LabeledDataset {
            images,
            labels,
            class_names: self.class_names.clone(),
            source: self.source.clone(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of each class, in dataset order.
    pub(crate) fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }

    /// `per_class` samples of every class, chosen by a seeded shuffle and
    /// returned in dataset order.
    pub fn stratified_subset(&self, per_class: usize, seed: u64) -> Result<Self, DataError> {
        let mut rng = SeededRng::derive(seed, "stratified-subset");
        let mut chosen = Vec::new();
        for (c, mut idx) in self.indices_by_class().into_iter().enumerate() {
            if idx.len() < per_class {
                return Err(DataError::TooFewSamples {
                    class: self.class_names[c].clone(),
                    count: idx.len(),
                    needed: per_class,
                });
            }
            rng.shuffle(&mut idx);
            chosen.extend_from_slice(&idx[..per_class]);
        }
        chosen.sort_unstable();
        self.subset(&chosen)
    }

    /// Keeps only the listed classes and relabels them `0..k` in the
    /// given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self, DataError> {
        let mut remap = vec![None; self.num_classes()];
        for (new, &old) in classes.iter().enumerate() {
            if old >= self.num_classes() {
                return Err(DataError::LabelOutOfRange { label: old, classes: self.num_classes() });
            }
            remap[old] = Some(new);
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| remap[self.labels[i]].is_some()).collect();
        let mut out = self.subset(&keep)?;
        out.labels = keep.iter().map(|&i| remap[self.labels[i]].expect("kept")).collect();
        out.class_names = classes.iter().map(|&c| self.class_names[c].clone()).collect();
        Ok(out)
    }

    /// SHA-256 over shape, pixel bits, labels and ids.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for &i in &self.ids {
            h.update(i.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// A train/test partition. The ids of the two sides never overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub split_seed: u64,
}

impl SplitPair {
    pub fn new(train: LabeledDataset, test: LabeledDataset, split_seed: u64) -> Result<Self, DataError> {
        if train.class_names != test.class_names {
            return Err(DataError::Invalid("train and test label spaces differ".into()));
        }
        if train.sample_shape() != test.sample_shape() {
            return Err(DataError::Invalid(format!(
                "train images are {}, test images are {}",
                train.sample_shape(),
                test.sample_shape()
            )));
        }
        let train_ids: HashSet<u64> = train.ids.iter().copied().collect();
        if let Some(id) = test.ids.iter().find(|i| train_ids.contains(i)) {
            return Err(DataError::Invalid(format!("sample id {id} is in both train and test")));
        }
        Ok(SplitPair { train, test, split_seed })
    }

    /// Identifies the exact partition, so runs can prove they saw the same data.
    pub fn split_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.train.content_hash().as_bytes());
        h.update(self.test.content_hash().as_bytes());
        h.update(self.split_seed.to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }
}

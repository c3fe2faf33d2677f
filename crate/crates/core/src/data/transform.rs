//! Resizing, channel replication, the stratified split and standardization.

use serde::{Deserialize, Serialize};

use crate::data::{DataError, LabeledDataset, SplitPair};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Lower bound applied to per-channel standard deviations.
pub const STD_EPSILON: f64 = 1e-6;

/// Bilinear resampling of one `[H, W, C]` image, align-corners = false.
///
/// Output pixel `(y, x)` samples the input at
/// `sy = (y + 0.5)·H/h − 0.5`, `sx = (x + 0.5)·W/w − 0.5`, clamped to
/// `[0, H−1] × [0, W−1]`, and blends the four surrounding pixels with
/// weights `(1−fy)(1−fx)`, `(1−fy)fx`, `fy(1−fx)`, `fy·fx` where `fy`,
/// `fx` are the fractional parts. No antialiasing prefilter is applied.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Result<Tensor, DataError> {
    if image.rank() != 3 {
        return Err(DataError::Invalid(format!("expected an [H, W, C] image, got {:?}", image.shape())));
    }
    if height == 0 || width == 0 {
        return Err(DataError::Invalid("target size must be positive".into()));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h == height && w == width {
        return Ok(image.clone());
    }
    let src = image.data();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(height, h);
    let xs = axis(width, w);
    let mut out = Vec::with_capacity(height * width * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::new(vec![height, width, c], out)?)
}

/// Resizes every image of a dataset.
pub fn resize_dataset(ds: &LabeledDataset, height: usize, width: usize) -> Result<LabeledDataset, DataError> {
    let s = ds.sample_shape();
    if s.height == height && s.width == width {
        return Ok(ds.clone());
    }
    let per = s.numel();
    let mut data = Vec::with_capacity(ds.len() * height * width * s.channels);
    for img in ds.images().data().chunks_exact(per) {
        let t = Tensor::new(vec![s.height, s.width, s.channels], img.to_vec())?;
        data.extend_from_slice(resize_bilinear(&t, height, width)?.data());
    }
    Ok(ds.with_images(Tensor::new(vec![ds.len(), height, width, s.channels], data)?))
}

/// Replicates a single grayscale channel into RGB; RGB passes through.
pub fn to_rgb(ds: &LabeledDataset) -> Result<LabeledDataset, DataError> {
    let s = ds.sample_shape();
    match s.channels {
        3 => Ok(ds.clone()),
        1 => {
            let data = ds.images().data().iter().flat_map(|&v| [v, v, v]).collect();
            Ok(ds.with_images(Tensor::new(vec![ds.len(), s.height, s.width, 3], data)?))
        }
        c => Err(DataError::Invalid(format!("cannot convert {c} channels to RGB"))),
    }
}

/// Stratified 80/20 split.
///
/// Each class is shuffled with a seeded generator. The global train size is
/// `⌊0.8·N⌋`; classes first get `⌊0.8·n_c⌋` train samples and the few left
/// over go to the classes with the largest fractional remainders (lowest
/// class index on ties), so each class stays within one sample of 80%.
pub fn split_80_20(ds: &LabeledDataset, seed: u64) -> Result<SplitPair, DataError> {
    let by_class = ds.indices_by_class();
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() < 2 {
            return Err(DataError::TooFewSamples { class: ds.class_names()[c].clone(), count: idx.len(), needed: 2 });
        }
    }
    let quota = train_quota(&by_class.iter().map(Vec::len).collect::<Vec<_>>());
    let mut rng = SeededRng::derive(seed, "split-80-20");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (mut idx, q) in by_class.into_iter().zip(quota) {
        rng.shuffle(&mut idx);
        train.extend_from_slice(&idx[..q]);
        test.extend_from_slice(&idx[q..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    SplitPair::new(ds.subset(&train)?, ds.subset(&test)?, seed)
}

/// Per-class train counts (largest-remainder apportionment of `⌊0.8·N⌋`).
pub(crate) fn train_quota(counts: &[usize]) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = total * 4 / 5;
    let mut quota: Vec<usize> = counts.iter().map(|&n| n * 4 / 5).collect();
    let assigned: usize = quota.iter().sum();
    // Remainders are (4·n mod 5)/5; compare the numerators.
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(counts[c] * 4 % 5), c));
    // A class never gives up its last test sample; its share passes on.
    let eligible = order.into_iter().filter(|&c| quota[c] + 1 < counts[c]);
    for c in eligible.take(target - assigned).collect::<Vec<_>>() {
        quota[c] += 1;
    }
    quota
}

/// Per-channel mean and standard deviation of a train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn from_dataset(ds: &LabeledDataset) -> Self {
        let c = ds.sample_shape().channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for px in ds.images().data().chunks_exact(c) {
            for ch in 0..c {
                sum[ch] += px[ch] as f64;
            }
        }
        let n = (ds.images().len() / c) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        for px in ds.images().data().chunks_exact(c) {
            for ch in 0..c {
                let d = px[ch] as f64 - mean[ch];
                sq[ch] += d * d;
            }
        }
        ChannelStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: sq.iter().map(|s| (s / n).sqrt().max(STD_EPSILON) as f32).collect(),
        }
    }

    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset, DataError> {
        let c = ds.sample_shape().channels;
        if c != self.mean.len() {
            return Err(DataError::Invalid(format!("stats cover {} channels, images have {c}", self.mean.len())));
        }
        let mut images = ds.images().clone();
        for px in images.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = (px[ch] - self.mean[ch]) / self.std[ch];
            }
        }
        Ok(ds.with_images(images))
    }
}

/// Standardizes both sides of a split with the train side's statistics.
pub fn normalize_standard(split: &SplitPair) -> Result<(SplitPair, ChannelStats), DataError> {
    let stats = ChannelStats::from_dataset(&split.train);
    let out =
        SplitPair { train: stats.apply(&split.train)?, test: stats.apply(&split.test)?, split_seed: split.split_seed };
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_for_single_class_of_ten() {
        assert_eq!(train_quota(&[10]), vec![8]);
        assert_eq!(train_quota(&[2]), vec![1]);
    }

    #[test]
    fn identity_resize_is_exact() {
        let t = Tensor::from_f64(&[2, 3, 1], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(resize_bilinear(&t, 2, 3).unwrap(), t);
    }
}

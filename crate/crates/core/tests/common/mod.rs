#![allow(dead_code)]

use fusionforge_core::data::{LabeledDataset, SplitPair};
use fusionforge_core::geometry::FeatureShape;
use fusionforge_core::rng::SeededRng;
use fusionforge_core::Tensor;

pub fn random_batch(batch: usize, shape: FeatureShape, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let data = (0..batch * shape.numel()).map(|_| rng.uniform() as f32).collect();
    Tensor::new(shape.with_batch(batch).to_vec(), data).unwrap()
}

/// Noisy images where class `k` lights up the `k`-th horizontal band.
pub fn banded(per_class: usize, classes: usize, shape: FeatureShape, seed: u64, first_id: u64) -> LabeledDataset {
    let mut rng = SeededRng::new(seed);
    let n = per_class * classes;
    let mut data = Vec::with_capacity(n * shape.numel());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        for y in 0..shape.height {
            let band = y * classes / shape.height;
            for _ in 0..shape.width * shape.channels {
                let base = if band == class { 0.8 } else { 0.1 };
                data.push((base + 0.2 * rng.uniform()) as f32);
            }
        }
    }
    let images = Tensor::new(shape.with_batch(n).to_vec(), data).unwrap();
    let names = (0..classes).map(|c| format!("band{c}")).collect();
    let ids = (first_id..first_id + n as u64).collect();
    LabeledDataset::new(images, labels, names, "bands", Some(ids)).unwrap()
}

pub fn banded_split(
    train_per_class: usize,
    test_per_class: usize,
    classes: usize,
    shape: FeatureShape,
    seed: u64,
) -> SplitPair {
    let train = banded(train_per_class, classes, shape, seed, 0);
    let test = banded(test_per_class, classes, shape, seed + 1, 1_000_000);
    SplitPair::new(train, test, seed).unwrap()
}

//! Built-in architectures.
//!
//! `custom16` is the 16-weight-layer residual CNN: fourteen conv blocks
//! (conv 3×3 → batchnorm → relu) in groups of 4/4/4/2 with widths
//! 32/64/128/128, an identity skip around each 4-block group, 2×2 max
//! pooling after every group, then dense(256) → relu → dense(classes).
//!
//! `tiny-a` and `tiny-b` are small stand-ins used as the two pretrained
//! constituents in desk-scale experiments.

use crate::geometry::FeatureShape;
use crate::nn::arch::{head_layers, Architecture, LayerSpec};
use crate::nn::graph::NetworkError;

pub const CUSTOM16: &str = "custom16";
pub const TINY_A: &str = "tiny-a";
pub const TINY_B: &str = "tiny-b";

/// Smallest spatial side that survives custom16's four 2×2 poolings with
/// at least a 2×2 map left.
pub const CUSTOM16_MIN_INPUT: usize = 32;

const CUSTOM16_GROUPS: [(usize, usize); 4] = [(32, 4), (64, 4), (128, 4), (128, 2)];
pub const CUSTOM16_HEAD: usize = 256;
pub const TINY_HEAD: usize = 64;

pub fn custom16(input: FeatureShape, num_classes: usize) -> Result<Architecture, NetworkError> {
    if input.height.min(input.width) < CUSTOM16_MIN_INPUT {
        return Err(NetworkError::Layer {
            layer: "input".into(),
            detail: format!("custom16 needs spatial dims ≥ {CUSTOM16_MIN_INPUT} for four pooling stages, got {input}"),
        });
    }
    let mut layers = Vec::new();
    for (g, &(width, blocks)) in CUSTOM16_GROUPS.iter().enumerate() {
        let g = g + 1;
        let residual = blocks == 4;
        if residual {
            layers.push(LayerSpec::residual_begin(format!("g{g}.skip_in")));
        }
        for b in 1..=blocks {
            layers.extend(Architecture::conv_block(&format!("g{g}.b{b}"), width));
        }
        if residual {
            layers.push(LayerSpec::residual_end(format!("g{g}.skip")));
        }
        layers.push(LayerSpec::maxpool(format!("g{g}.pool"), 2, 2));
    }
    layers.push(LayerSpec::flatten("flatten"));
    layers.extend(head_layers("head", &[CUSTOM16_HEAD], num_classes));
    Ok(Architecture { id: Some(CUSTOM16.into()), input, num_classes, layers })
}

pub fn tiny_a(input: FeatureShape, num_classes: usize) -> Architecture {
    let mut layers = Vec::new();
    layers.extend(Architecture::conv_block("b1", 8));
    layers.push(LayerSpec::maxpool("p1", 2, 2));
    layers.extend(Architecture::conv_block("b2", 16));
    layers.push(LayerSpec::maxpool("p2", 2, 2));
    layers.extend(Architecture::conv_block("b3", 32));
    layers.push(LayerSpec::flatten("flatten"));
    layers.extend(head_layers("head", &[TINY_HEAD], num_classes));
    Architecture { id: Some(TINY_A.into()), input, num_classes, layers }
}

pub fn tiny_b(input: FeatureShape, num_classes: usize) -> Architecture {
    let mut layers = Vec::new();
    layers.extend(Architecture::conv_block("b1", 16));
    layers.extend(Architecture::conv_block("b2", 16));
    layers.push(LayerSpec::maxpool("p1", 2, 2));
    layers.extend(Architecture::conv_block("b3", 32));
    layers.push(LayerSpec::maxpool("p2", 2, 2));
    layers.extend(Architecture::conv_block("b4", 64));
    layers.push(LayerSpec::flatten("flatten"));
    layers.extend(head_layers("head", &[TINY_HEAD], num_classes));
    Architecture { id: Some(TINY_B.into()), input, num_classes, layers }
}

/// Looks up a built-in architecture by id.
pub fn by_id(id: &str, input: FeatureShape, num_classes: usize) -> Result<Architecture, NetworkError> {
    match id {
        CUSTOM16 => custom16(input, num_classes),
        TINY_A => Ok(tiny_a(input, num_classes)),
        TINY_B => Ok(tiny_b(input, num_classes)),
        other => Err(NetworkError::Layer { layer: other.into(), detail: "unknown architecture id".into() }),
    }
}

//! Architecture descriptions: an ordered list of named layers plus the
//! input shape and class count. This is the JSON document the CLI reads
//! and the checkpoint container embeds.

use serde::{Deserialize, Serialize};

use crate::geometry::FeatureShape;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Input channels are inferred from the incoming feature map.
    Conv {
        kernel_size: usize,
        padding: usize,
        stride: usize,
        out_channels: usize,
    },
    Batchnorm,
    Relu,
    Maxpool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
    },
    /// Remembers the current activation for a later `residual_end`.
    ResidualBegin,
    /// Adds the remembered activation back, through an adapter
    /// convolution when the shapes disagree.
    ResidualEnd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind }
    }

    pub fn conv(
        name: impl Into<String>,
        kernel_size: usize,
        padding: usize,
        stride: usize,
        out_channels: usize,
    ) -> Self {
        Self::new(name, LayerKind::Conv { kernel_size, padding, stride, out_channels })
    }

    pub fn batchnorm(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Batchnorm)
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn maxpool(name: impl Into<String>, window: usize, stride: usize) -> Self {
        Self::new(name, LayerKind::Maxpool { window, stride })
    }

    pub fn flatten(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Flatten)
    }

    pub fn dense(name: impl Into<String>, units: usize) -> Self {
        Self::new(name, LayerKind::Dense { units })
    }

    pub fn residual_begin(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::ResidualBegin)
    }

    pub fn residual_end(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::ResidualEnd)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Optional identifier such as `custom16` or `tiny-a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub input: FeatureShape,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Conv → batchnorm → relu, the block whose output is a tap point.
    pub fn conv_block(prefix: &str, out_channels: usize) -> [LayerSpec; 3] {
        [
            LayerSpec::conv(format!("{prefix}.conv"), 3, 1, 1, out_channels),
            LayerSpec::batchnorm(format!("{prefix}.bn")),
            LayerSpec::relu(format!("{prefix}.relu")),
        ]
    }

    /// Layers up to and including the first flatten, followed by a fresh
    /// dense head: `head_sizes` hidden layers with ReLU, then the logits.
    pub fn with_head(&self, head_sizes: &[usize], num_classes: usize) -> Option<Architecture> {
        let cut = self.layers.iter().position(|l| l.kind == LayerKind::Flatten)?;
        let mut layers = self.layers[..=cut].to_vec();
        layers.extend(head_layers("head", head_sizes, num_classes));
        Some(Architecture { id: self.id.clone(), input: self.input, num_classes, layers })
    }
}

pub fn head_layers(prefix: &str, head_sizes: &[usize], num_classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (i, &units) in head_sizes.iter().enumerate() {
        layers.push(LayerSpec::dense(format!("{prefix}.fc{i}"), units));
        layers.push(LayerSpec::relu(format!("{prefix}.fc{i}.relu")));
    }
    layers.push(LayerSpec::dense(format!("{prefix}.logits"), num_classes));
    layers
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_json_shape() {
        let l = LayerSpec::conv("c1", 3, 1, 1, 8);
        let v: serde_json::Value = serde_json::to_value(&l).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"name": "c1", "kind": "conv", "kernel_size": 3, "padding": 1, "stride": 1, "out_channels": 8})
        );
        let back: LayerSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let r: Result<LayerSpec, _> = serde_json::from_str(r#"{"name":"x","kind":"attention"}"#);
        assert!(r.is_err());
    }
}

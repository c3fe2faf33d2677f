//! A trained artifact: either a single network or a fused pair.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fusion::{FusedArchitecture, FusedNetwork, FusionError};
use crate::geometry::FeatureShape;
use crate::nn::{Architecture, NetworkGraph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArchitecture {
    Single(Architecture),
    Fused(FusedArchitecture),
}

#[derive(Debug, Clone)]
pub enum Model {
    Single(NetworkGraph),
    Fused(FusedNetwork),
}

impl Model {
    pub fn architecture(&self) -> ModelArchitecture {
        match self {
            Model::Single(n) => ModelArchitecture::Single(n.architecture().clone()),
            Model::Fused(f) => ModelArchitecture::Fused(f.architecture()),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Single(n) => n.num_classes(),
            Model::Fused(f) => f.num_classes(),
        }
    }

    pub fn input_shape(&self) -> FeatureShape {
        match self {
            Model::Single(n) => n.input_shape(),
            Model::Fused(f) => f.input_shape(),
        }
    }

    pub fn eval_logits(&self, batch: &Tensor) -> Result<Tensor, FusionError> {
        match self {
            Model::Single(n) => Ok(n.eval_logits(batch)?),
            Model::Fused(f) => f.eval_logits(batch),
        }
    }

    /// Named value blocks in the checkpoint's declaration order.
    pub fn storage(&self) -> Vec<(String, &[f32])> {
        match self {
            Model::Single(n) => n.storage(),
            Model::Fused(f) => f.storage(),
        }
    }

    pub(crate) fn storage_mut(&mut self) -> Vec<&mut [f32]> {
        match self {
            Model::Single(n) => n.storage_mut(),
            Model::Fused(f) => f.storage_mut(),
        }
    }

    pub(crate) fn mark_initialized(&mut self) {
        match self {
            Model::Single(n) => n.mark_initialized(),
            Model::Fused(f) => f.mark_initialized(),
        }
    }

    /// SHA-256 over every stored value's bit pattern, in declaration order.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, values) in self.storage() {
            h.update(name.as_bytes());
            for v in values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

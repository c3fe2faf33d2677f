//! Cross-model fusion: two pretrained networks exchange activations through
//! adapter convolutions, and their flattened features are concatenated into
//! a shared dense head.

mod fused;
mod plan;

use thiserror::Error;

use crate::nn::NetworkError;
use crate::tensor::TensorError;

pub use crate::geometry::{make_adapter, AdapterSpec};
pub use fused::{build_fused, FusedArchitecture, FusedNetwork, FusedOutput, Provenance};
pub use plan::{propose_pairing, ExchangeLink, FusionPlan, HeadSpec, Side, TapPoint};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no pairing: no tap pair can be adapted in either direction (A: [{ladder_a}]; B: [{ladder_b}])")]
    NoPairing { ladder_a: String, ladder_b: String },
    #[error("fusion plan: {0}")]
    Plan(String),
    #[error("exchange links form a cycle through {0}")]
    Cycle(String),
    #[error("schedule violation: {0}")]
    Schedule(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

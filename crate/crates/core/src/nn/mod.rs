//! Layer graphs over the tensor core.

mod arch;
mod forward;
mod graph;
pub mod zoo;

pub use arch::{head_layers, Architecture, LayerKind, LayerSpec};
pub use forward::{all_trainable, apply_moments, ActivationTrace, Mode, RunOutput, Runner, Trainable};
pub(crate) use graph::he_fill;
pub use graph::{
    bias_name, weight_name, NetworkError, NetworkGraph, RunningStats, TapInfo, ValueShape, BATCHNORM_EPS,
    BATCHNORM_MOMENTUM, MAX_ARCH_DIM,
};

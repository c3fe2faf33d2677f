//! Tensor autodiff, CNN layers, cross-model fusion, training workflows and
//! dataset loaders for transferred fusion learning: two pretrained CNNs
//! joined by cross-model skip connections and a shared dense head.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod reference;
pub mod rng;
pub mod scalar;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use geometry::{AdapterSpec, ConvGeometry, FeatureShape, PoolGeometry};
pub use nn::{Architecture, LayerSpec, Mode, NetworkGraph};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};
pub use train::{evaluate, train, MetricsRecord, TrainConfig, TrainError};

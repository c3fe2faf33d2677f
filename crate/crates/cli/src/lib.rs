//! Experiment harness for transferred fusion learning: pretrain two
//! models, run the transfer-learning baselines and the hybrid retrain, and
//! compare them in a table.

pub mod commands;
pub mod compare;
pub mod config;
pub mod datasets;
pub mod error;
pub mod runs;

pub use commands::{cmd_baseline, cmd_check, cmd_compare, cmd_fuse_retrain, cmd_pretrain, cmd_run, Context, Overrides};
pub use compare::{Comparison, ComparisonRow};
pub use config::{DatasetKind, DatasetSpec, ExperimentConfig};
pub use error::{CliError, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};

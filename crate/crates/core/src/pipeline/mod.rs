//! Model wiring, training, inference and reporting.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod stats;
pub mod train;

pub use config::{ModelConfig, ProposalInit, SamplingMode};
pub use model::{Bound, Forward, LossVars, Model, ParamStore, ProposalSource};

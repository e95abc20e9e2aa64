//! Two-stage lane detection: cheap line proposals sketched from a local
//! direction map, then refined by grouped segment attention.

pub mod assign;
pub mod error;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod sampler;
pub mod sketch;
pub mod synthdata;

pub use error::{Error, Result};

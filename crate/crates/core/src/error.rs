use std::path::PathBuf;

use srlane_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lane geometry: {0}")]
    Geometry(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("assignment: {0}")]
    Assignment(String),
    #[error("{path}:{line}: {msg}")]
    Record { path: PathBuf, line: usize, msg: String },
    #[error("scene generation failed after {attempts} attempts: {msg}")]
    Generation { attempts: usize, msg: String },
    #[error("{term} loss is not finite ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

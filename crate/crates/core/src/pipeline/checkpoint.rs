//! Model checkpoints: parameters, configuration, step counter and optimizer
//! moments in one directory.

use std::path::Path;

use serde_json::json;
use srlane_numerics::checkpoint::{self, read_manifest, Manifest};
use srlane_numerics::optim::AdamW;
use srlane_numerics::Array;

use super::config::ModelConfig;
use super::model::{Model, ParamStore};
use crate::error::{Error, Result};

const FIRST: &str = "adam.m.";
const SECOND: &str = "adam.v.";

/// Optimizer moments and step restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub step: u64,
    pub first: Vec<Array<f32>>,
    pub second: Vec<Array<f32>>,
}

pub fn save_checkpoint(dir: &Path, model: &Model, opt: Option<&AdamW<f32>>) -> Result<()> {
    let mut tensors = model.params.pairs();
    let step = opt.map_or(0, |o| o.step);
    if let Some(o) = opt {
        for (name, m) in model.params.names.iter().zip(&o.first) {
            tensors.push((format!("{FIRST}{name}"), m.clone()));
        }
        for (name, v) in model.params.names.iter().zip(&o.second) {
            tensors.push((format!("{SECOND}{name}"), v.clone()));
        }
    }
    let meta = json!({
        "config": serde_json::to_value(&model.config)?,
        "step": step,
    });
    checkpoint::save(dir, &tensors, meta)?;
    Ok(())
}

/// Load a model and, when present, its optimizer state.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Option<OptimState>)> {
    let (tensors, meta) = checkpoint::load(dir)?;
    let config: ModelConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::Config(format!("{}: checkpoint has no config", dir.display())))?,
    )?;
    config.validate()?;
    let step = meta.get("step").and_then(|s| s.as_u64()).unwrap_or(0);
    let mut model = Model::new(config)?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut params = ParamStore::default();
    for (name, arr) in tensors {
        if let Some(n) = name.strip_prefix(FIRST) {
            first.push((n.to_string(), arr));
        } else if let Some(n) = name.strip_prefix(SECOND) {
            second.push((n.to_string(), arr));
        } else {
            params.push(name, arr);
        }
    }
    if params.names != model.params.names {
        return Err(Error::Config(format!(
            "{}: parameter set does not match the stored config",
            dir.display()
        )));
    }
    for (name, (fresh, loaded)) in params.names.iter().zip(model.params.values.iter().zip(&params.values)) {
        if fresh.shape() != loaded.shape() {
            return Err(Error::Config(format!(
                "{}: parameter {name} has shape {:?}, config implies {:?}",
                dir.display(),
                loaded.shape(),
                fresh.shape()
            )));
        }
    }
    model.params = params;
    let opt = if first.is_empty() {
        None
    } else {
        let order = |v: Vec<(String, Array<f32>)>| -> Result<Vec<Array<f32>>> {
            if v.iter().map(|p| &p.0).ne(model.params.names.iter()) {
                return Err(Error::Config(format!(
                    "{}: optimizer state does not match parameters",
                    dir.display()
                )));
            }
            Ok(v.into_iter().map(|p| p.1).collect())
        };
        Some(OptimState {
            step,
            first: order(first)?,
            second: order(second)?,
        })
    };
    Ok((model, opt))
}

pub fn manifest(dir: &Path) -> Result<Manifest> {
    Ok(read_manifest(dir)?)
}

pub fn is_moment(name: &str) -> bool {
    name.starts_with(FIRST) || name.starts_with(SECOND)
}

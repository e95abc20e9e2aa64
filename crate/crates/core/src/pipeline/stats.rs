//! Parameter counts per module and head MAC estimates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use srlane_numerics::Tape;

use super::checkpoint::{is_moment, manifest};
use super::config::ModelConfig;
use super::model::{Model, ProposalSource};
use crate::error::Result;

/// Modules in report order; the head is everything after the backbone.
pub const MODULES: [&str; 8] = ["backbone", "neck", "direction", "sampler", "proj", "lsam", "cls", "reg"];
pub const HEAD_MODULES: [&str; 5] = ["sampler", "proj", "lsam", "cls", "reg"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamTable {
    pub modules: BTreeMap<String, usize>,
    pub total: usize,
    pub head: usize,
    pub proposals: usize,
    /// Multiply-accumulates of the head's dense layers at the configured L.
    pub head_macs: u64,
}

impl ParamTable {
    pub fn table(&self) -> String {
        let mut s = format!("{:<12}{:>12}\n", "module", "params");
        for m in MODULES {
            if let Some(n) = self.modules.get(m) {
                s += &format!("{m:<12}{n:>12}\n");
            }
        }
        s += &format!("{:<12}{:>12}\n", "head", self.head);
        s += &format!("{:<12}{:>12}\n", "total", self.total);
        s += &format!(
            "head MACs at L={}: {} ({:.2} M)\n",
            self.proposals,
            self.head_macs,
            self.head_macs as f64 / 1e6
        );
        s
    }
}

fn module_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn tabulate<'a>(entries: impl Iterator<Item = (&'a str, usize)>, config: &ModelConfig) -> ParamTable {
    let mut modules = BTreeMap::new();
    for (name, n) in entries {
        *modules.entry(module_of(name).to_string()).or_insert(0) += n;
    }
    let total = modules.values().sum();
    let head = HEAD_MODULES.iter().filter_map(|m| modules.get(*m)).sum();
    let proposals = config.proposals();
    ParamTable {
        modules,
        total,
        head,
        proposals,
        head_macs: head_macs(config, proposals),
    }
}

pub fn count_parameters(model: &Model) -> ParamTable {
    tabulate(
        model
            .params
            .names
            .iter()
            .map(String::as_str)
            .zip(model.params.values.iter().map(|v| v.len())),
        &model.config,
    )
}

/// Counts read from a checkpoint manifest; optimizer moments are excluded.
pub fn count_checkpoint(dir: &Path) -> Result<ParamTable> {
    let m = manifest(dir)?;
    let config: ModelConfig = serde_json::from_value(m.metadata["config"].clone())?;
    Ok(tabulate(
        m.entries
            .iter()
            .filter(|e| !is_moment(&e.name))
            .map(|e| (e.name.as_str(), e.shape.iter().product())),
        &config,
    ))
}

/// Analytic head MACs for `l` proposals: grouped projection, LSAM
/// (projections, scores, mixing, FFN) and the two MLP heads.
pub fn head_macs(c: &ModelConfig, l: usize) -> u64 {
    let (l, np, d, ch, g, n) = (
        l as u64,
        c.points as u64,
        c.feat_dim as u64,
        c.channels as u64,
        c.groups as u64,
        c.rows as u64,
    );
    let proj = l * np * d * ch / g;
    let lsam = if c.lsam {
        let q = l * ch * ch;
        let kv = 2 * l * ch * ch / g;
        let attn = 2 * l * l * ch;
        let ffn = 4 * l * ch * ch;
        q + kv + attn + ffn
    } else {
        0
    };
    let cls = l * ch * c.cls_hidden as u64 + l * c.cls_hidden as u64;
    let reg = l * ch * c.reg_hidden as u64 + l * c.reg_hidden as u64 * (n + 2);
    proj + lsam + cls + reg
}

/// Head MACs counted by the tape during a forward pass with `l` proposals
/// (grid rows fixed, columns chosen to give `l`).
pub fn measured_head_macs(config: &ModelConfig, l: usize) -> Result<u64> {
    let mut c = config.clone();
    c.grid_cols = l.div_ceil(c.grid_rows);
    c.grid_rows = l / c.grid_cols;
    if c.grid_rows * c.grid_cols != l {
        c.grid_rows = 1;
        c.grid_cols = l;
    }
    let model = Model::new(c.clone())?;
    let mut tape = Tape::<f32>::new();
    let p = model.params.bind(&mut tape);
    let x = tape.constant(srlane_numerics::Array::zeros(&[3, c.input_h, c.input_w]));
    let f = model.forward(&mut tape, &p, x, ProposalSource::Config)?;
    Ok(f.head_macs)
}

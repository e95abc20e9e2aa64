//! Model variants for ablation runs and the sampling/attention matrix report.

use std::fmt;

use serde::Serialize;

use super::config::{ModelConfig, ProposalInit, SamplingMode};
use super::train::{evaluate_f1, train, TrainOptions};
use crate::error::{Error, Result};
use crate::synthdata::AnnotatedScene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    AnchorInit,
    NoLsam,
    SingleLevel,
    SingleLevelNoLsam,
}

/// The four rows of the sampling/attention matrix, in report order.
pub const MATRIX: [Variant; 4] = [
    Variant::SingleLevelNoLsam,
    Variant::NoLsam,
    Variant::SingleLevel,
    Variant::Full,
];

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::AnchorInit => "anchor-init",
            Variant::NoLsam => "no-lsam",
            Variant::SingleLevel => "single-level",
            Variant::SingleLevelNoLsam => "single-level-no-lsam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Variant::Full,
            Variant::AnchorInit,
            Variant::NoLsam,
            Variant::SingleLevel,
            Variant::SingleLevelNoLsam,
        ]
        .into_iter()
        .find(|v| v.as_str() == s)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown variant {s:?} (expected full, anchor-init, no-lsam, single-level or single-level-no-lsam)"
            ))
        })
    }

    pub fn adaptive(self) -> bool {
        !matches!(self, Variant::SingleLevel | Variant::SingleLevelNoLsam)
    }

    pub fn lsam(self) -> bool {
        !matches!(self, Variant::NoLsam | Variant::SingleLevelNoLsam)
    }

    /// `base` with this variant's switches applied.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.sampling = if self.adaptive() {
            SamplingMode::Adaptive
        } else {
            SamplingMode::SingleLevel
        };
        c.lsam = self.lsam();
        if self == Variant::AnchorInit {
            c.proposal_init = ProposalInit::Anchor;
        }
        if !c.lsam {
            c.w_attn = 0.0;
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub adaptive: bool,
    pub lsam: bool,
    pub anchors: bool,
    pub f1: f64,
    pub final_loss: f64,
    pub train_s: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn table(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { " " };
        let mut s = format!(
            "{:<22}{:>10}{:>7}{:>9}{:>9}{:>12}\n",
            "variant", "adaptive", "lsam", "anchors", "F1", "train s"
        );
        for r in &self.rows {
            s += &format!(
                "{:<22}{:>10}{:>7}{:>9}{:>9.4}{:>12.0}\n",
                r.variant.as_str(),
                mark(r.adaptive),
                mark(r.lsam),
                mark(r.anchors),
                r.f1,
                r.train_s
            );
        }
        s
    }
}

/// Train one model per variant on `scenes` and score each on `test`.
/// `val` is used only for score-threshold calibration.
pub fn run_ablation(
    base: &ModelConfig,
    variants: &[Variant],
    scenes: &[AnnotatedScene],
    val: Option<&[AnnotatedScene]>,
    test: &[AnnotatedScene],
    opts: &TrainOptions,
) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for &v in variants {
        let c = v.apply(base);
        let o = TrainOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(v.as_str())),
            ..opts.clone()
        };
        let out = train(&c, scenes, val, &o)?;
        let tail = &out.log[out.log.len().saturating_sub(100)..];
        report.rows.push(AblationRow {
            variant: v,
            adaptive: v.adaptive(),
            lsam: v.lsam(),
            anchors: v == Variant::AnchorInit,
            f1: evaluate_f1(&out.model, test)?,
            final_loss: tail.iter().map(|r| r.total).sum::<f64>() / tail.len().max(1) as f64,
            train_s: out.log.last().map_or(0.0, |r| r.elapsed_s),
        });
    }
    Ok(report)
}

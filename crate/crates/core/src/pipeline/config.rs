//! Flat key-value model and training configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};
use srlane_numerics::optim::AdamWConfig;

use crate::assign::LossWeights;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Learned mixture over all pyramid levels.
    Adaptive,
    /// Stride-8 level of a top-down feature pyramid only.
    SingleLevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalInit {
    /// Lines built from the predicted direction map.
    Direction,
    /// Fixed evenly spaced straight anchors.
    Anchor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_w: usize,
    pub input_h: usize,
    /// Channels of the two stride-2 stem convolutions.
    pub stem_width: usize,
    /// Backbone widths at strides 8, 16, 32.
    pub widths: [usize; 3],
    /// Proposal grid; one proposal per cell.
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Lane rows `N`.
    pub rows: usize,
    /// Sample points per proposal `N_p`.
    pub points: usize,
    /// Segment groups `G`.
    pub groups: usize,
    /// Proposal feature width `c`.
    pub channels: usize,
    /// Common pyramid channel count `d`.
    pub feat_dim: usize,
    pub cls_hidden: usize,
    pub reg_hidden: usize,
    /// Pixels per unit of the regression head's x offsets.
    pub dx_scale: f64,
    /// Initial value of every entry of the scale embedding.
    pub z_init: f64,
    pub sampling: SamplingMode,
    pub lsam: bool,
    pub proposal_init: ProposalInit,
    /// Direction supervision neighborhood, in cells.
    pub tau: f64,
    /// LineIoU radius for matching and the regression loss, in pixels.
    pub loss_radius: f64,
    pub w_cls: f64,
    pub w_reg: f64,
    pub w_dir: f64,
    pub w_attn: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub iterations: usize,
    pub min_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub flip_aug: bool,
    pub score_thr: f64,
    /// After training with a validation set, replace `score_thr` by the
    /// candidate with the best validation F1.
    pub calibrate_thr: bool,
    pub nms: bool,
    pub nms_thr: f64,
    pub checkpoint_every: usize,
    /// Validation F1 every this many iterations (0 disables).
    pub val_every: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_w: 160,
            input_h: 64,
            stem_width: 16,
            widths: [16, 32, 64],
            grid_rows: 4,
            grid_cols: 10,
            rows: 72,
            points: 36,
            groups: 6,
            channels: 192,
            feat_dim: 64,
            cls_hidden: 64,
            reg_hidden: 128,
            dx_scale: 1.0,
            z_init: 4.0,
            sampling: SamplingMode::Adaptive,
            lsam: true,
            proposal_init: ProposalInit::Direction,
            tau: 1.5,
            loss_radius: 1.5,
            w_cls: 2.0,
            w_reg: 1.0,
            w_dir: 0.05,
            w_attn: 0.05,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            warmup_steps: 800,
            iterations: 5000,
            min_lr: 0.0,
            batch_size: 8,
            seed: 0,
            flip_aug: true,
            score_thr: 0.4,
            calibrate_thr: true,
            nms: true,
            nms_thr: 0.5,
            checkpoint_every: 1000,
            val_every: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let positive = [
            ("input_w", self.input_w),
            ("input_h", self.input_h),
            ("stem_width", self.stem_width),
            ("widths[0]", self.widths[0]),
            ("widths[1]", self.widths[1]),
            ("widths[2]", self.widths[2]),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
            ("points", self.points),
            ("groups", self.groups),
            ("channels", self.channels),
            ("feat_dim", self.feat_dim),
            ("cls_hidden", self.cls_hidden),
            ("reg_hidden", self.reg_hidden),
            ("batch_size", self.batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return err(format!("{k} must be positive"));
        }
        if !self.input_w.is_multiple_of(32) || !self.input_h.is_multiple_of(32) {
            return err(format!(
                "input {}x{} must be divisible by the coarsest stride 32",
                self.input_w, self.input_h
            ));
        }
        if self.rows < 2 {
            return err("rows must be at least 2".into());
        }
        if !self.channels.is_multiple_of(self.groups) {
            return err(format!(
                "channels ({}) must be divisible by groups ({})",
                self.channels, self.groups
            ));
        }
        if self.points < self.groups {
            return err(format!(
                "points ({}) must be at least groups ({})",
                self.points, self.groups
            ));
        }
        for (k, v) in [
            ("w_cls", self.w_cls),
            ("w_reg", self.w_reg),
            ("w_dir", self.w_dir),
            ("w_attn", self.w_attn),
        ] {
            if v.is_nan() || v < 0.0 {
                return err(format!("{k} must be nonnegative"));
            }
        }
        if !(self.loss_radius > 0.0 && self.tau > 0.0 && self.dx_scale > 0.0) {
            return err("loss_radius, tau and dx_scale must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.score_thr) || !(0.0..=1.0).contains(&self.nms_thr) {
            return err("score_thr and nms_thr must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn proposals(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cls: self.w_cls,
            reg: self.w_reg,
            dir: self.w_dir,
            attn: self.w_attn,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps as u64,
            total_steps: self.iterations as u64,
            min_lr: self.min_lr,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

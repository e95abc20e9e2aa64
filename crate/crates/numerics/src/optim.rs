//! AdamW with linear warm-up followed by cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, NumericsError, Result};
use crate::{Array, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Length of the cosine cycle, warm-up included. Past it the rate stays
    /// at `min_lr`.
    pub total_steps: u64,
    pub min_lr: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            warmup_steps: 800,
            total_steps: 5000,
            min_lr: 0.0,
        }
    }
}

impl AdamWConfig {
    /// Learning rate used for the `step`-th update (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.lr;
        }
        let t = (step - self.warmup_steps).min(span) as f64 / span as f64;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Moments and step counter for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub first: Vec<Array<T>>,
    pub second: Vec<Array<T>>,
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Array<T>]) -> Self {
        let zeros = |p: &Array<T>| Array::zeros(p.shape());
        Self {
            config,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step.max(1))
    }

    /// One decoupled-weight-decay Adam update. `names` label errors.
    pub fn step(&mut self, params: &mut [Array<T>], grads: &[Array<T>], names: &[String]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return invalid(
                "adamw_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            );
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(NumericsError::Shape {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(NumericsError::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *w = *w * decay - step_size * *m / (v.sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

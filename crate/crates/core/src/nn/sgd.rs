use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Param, Visitor};
use crate::error::{CssError, Result};

/// SGD with heavy-ball momentum, L2 weight decay and step decay at fixed
/// fractions of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the epoch budget after which the rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.5, 0.75],
            gamma: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CssError::Config(format!(
                "optimizer.lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CssError::Config(format!(
                "optimizer.momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CssError::Config(
                "optimizer.weight_decay must be non-negative".into(),
            ));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(CssError::Config(
                "optimizer.milestones must lie in [0, 1]".into(),
            ));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(CssError::Config("optimizer.gamma must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a zero-based `epoch` out of `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * epochs as f64).round() as usize)
            .count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

/// One update over every visited parameter; gradients are cleared afterwards.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Visitor for Sgd {
    fn param(&mut self, _: &str, p: &mut Param) {
        let Param {
            value,
            grad,
            velocity,
        } = p;
        ndarray::Zip::from(&mut *value)
            .and(&mut *velocity)
            .and(&*grad)
            .for_each(|w, v, &g| {
                let g = g + self.weight_decay * *w;
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            });
        grad.fill(0.0);
    }

    fn buffer(&mut self, _: &str, _: &mut ArrayD<f64>) {}
}

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::error::{Error, Result};
use crate::text::DEFAULT_MASK_RATE;

/// Storage precision of parameters between optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    /// Parameters are rounded through `f32` after every update.
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Full memory refresh cadence, in optimizer steps.
    pub refresh_every: usize,
    pub mask_rate: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub precision: Precision,
    /// Parameter-name prefixes held fixed; their gradients are dropped.
    #[serde(default)]
    pub freeze: Vec<String>,
}

pub const DEFAULT_REFRESH_EVERY: usize = 200;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 16,
            lr: 3e-4,
            seed: 0,
            refresh_every: DEFAULT_REFRESH_EVERY,
            mask_rate: DEFAULT_MASK_RATE,
            grad_clip: 1.0,
            weight_decay: 0.0,
            precision: Precision::F64,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refresh_every == 0 {
            return Err(Error::Config("refresh_every must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask rate {} outside (0, 1)", self.mask_rate)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is not a finite non-negative number", self.lr)));
        }
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.freeze.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip: self.grad_clip,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Proj;
use crate::objective::DistillConfig;

/// Hyperparameters of a pruning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Decay rate of the proximal shrink.
    pub eta1: f64,
    /// Step size for the sparsity levels `s`.
    pub eta2: f64,
    /// Ascent rate for `y`.
    pub eta3: f64,
    /// Ascent rate for `z`.
    pub eta4: f64,
    pub mask_lr: f64,
    pub lora_lr: f64,
    pub lora_rank: usize,
    pub batch_size: usize,
    /// Tokens per training window.
    pub window: usize,
    /// Total iterations `tau`.
    pub iterations: usize,
    pub interval_start: usize,
    pub interval_end: usize,
    pub target_sparsity: f64,
    pub alpha: f64,
    pub include_lm_loss: bool,
    pub lm_loss_weight: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            eta1: 5.0,
            eta2: 1e-3,
            eta3: 3e-3,
            eta4: 1e-5,
            mask_lr: 1e-2,
            lora_lr: 1e-3,
            lora_rank: 4,
            batch_size: 16,
            window: 128,
            iterations: 2000,
            interval_start: 10,
            interval_end: 1,
            target_sparsity: 0.5,
            alpha: 1.0,
            include_lm_loss: false,
            lm_loss_weight: 1.0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("eta3", self.eta3),
            ("eta4", self.eta4),
            ("mask_lr", self.mask_lr),
            ("lora_lr", self.lora_lr),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.batch_size == 0 || self.window == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "batch_size, window and iterations must be >= 1".into(),
            ));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be >= 1".into()));
        }
        if !(self.interval_start >= self.interval_end && self.interval_end >= 1) {
            return Err(Error::Config(format!(
                "need interval_start >= interval_end >= 1, got {} and {}",
                self.interval_start, self.interval_end
            )));
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::Config(format!(
                "target_sparsity must lie in [0, 1), got {}",
                self.target_sparsity
            )));
        }
        self.distill().validate()
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            alpha: self.alpha,
            include_lm_loss: self.include_lm_loss,
            lm_loss_weight: self.lm_loss_weight,
        }
    }

    pub fn lora_targets(&self) -> Vec<Proj> {
        Proj::ALL.to_vec()
    }
}

/// FFN prox cadence: `round(start + (end - start) t / tau)`, halves rounded
/// up, never below one.
pub fn interval_schedule(t: usize, cfg: &RunConfig) -> usize {
    let t = t.min(cfg.iterations) as f64;
    let (a, b) = (cfg.interval_start as f64, cfg.interval_end as f64);
    let x = a + (b - a) * t / cfg.iterations as f64;
    ((x + 0.5).floor() as usize).max(1)
}

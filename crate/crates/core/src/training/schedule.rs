use serde::{Deserialize, Serialize};

use crate::error::{DcamError, Result};

/// Optimisation recipe and data settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub seed: u64,
    /// Square training crop side; a multiple of 32.
    pub crop_size: usize,
    /// Share of scenes held out for validation.
    pub val_fraction: f64,
    /// Random resize, colour jitter and crop on training scenes.
    pub augment: bool,
    /// Trimap band radius range used to synthesise training trimaps.
    pub trimap_radius: (f64, f64),
    /// Trimap band radius used for validation.
    pub eval_trimap_radius: f64,
    /// In click mode, also train on unguided samples (mode drawn per batch).
    pub joint_none: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr_init: 1e-4,
            lr_final: 1e-7,
            betas: (0.5, 0.999),
            weight_decay: 1e-5,
            seed: 0,
            crop_size: 128,
            val_fraction: 0.1,
            augment: true,
            trimap_radius: (3.0, 12.0),
            eval_trimap_radius: 7.0,
            joint_none: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(DcamError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(DcamError::Config("batch size must be at least 1".into()));
        }
        if !(self.lr_final < self.lr_init) || self.lr_final < 0.0 {
            return Err(DcamError::Config(format!(
                "need 0 <= lr_final < lr_init, got {} and {}",
                self.lr_final, self.lr_init
            )));
        }
        if self.crop_size == 0 || self.crop_size % 32 != 0 {
            return Err(DcamError::Config(format!("crop size {} is not a positive multiple of 32", self.crop_size)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(DcamError::Config("validation fraction must lie in [0, 1)".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(DcamError::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_init` at step 0 to `lr_final` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(DcamError::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(DcamError::Config(format!("step {step} beyond total {total_steps}")));
    }
    // Written as a convex combination so both endpoints are exact.
    let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
    Ok(cfg.lr_init * w + cfg.lr_final * (1.0 - w))
}

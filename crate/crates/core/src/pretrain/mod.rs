//! The two masked pre-training objectives, batching and the training loop.

mod batch;
mod checkpoint;
mod run;
mod trainer;

pub use batch::{align_labels, crop_labels, Batcher, CropPlan};
pub use checkpoint::Checkpoint;
pub use run::{
    checkpoint_name, label_path, run_iteration_pipeline, run_pretraining, IterationOutput, PretrainOutput,
    PretrainRun, FINAL_CHECKPOINT, LOSS_LOG,
};
pub use trainer::{StepStats, Trainer};

use serde::{Deserialize, Serialize};

use crate::dsp::SAMPLE_RATE;
use crate::encoder::{HeadConfig, MaskSpec, Paradigm, TargetLayers, TauSchedule};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SmoothL1,
}

/// Which frames the continuous regression loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFrames {
    Masked,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub steps: u64,
    pub crop_seconds: f64,
    /// Audio samples per batch, shared out among `token_budget / crop` crops.
    pub token_budget: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub grad_clip: f32,
    pub mask: MaskSpec,
    pub head: HeadConfig,
    // continuous objective
    pub target_layers: TargetLayers,
    pub normalize_targets: bool,
    pub loss_kind: LossKind,
    pub smooth_l1_beta: f32,
    pub loss_frames: LossFrames,
    pub tau: TauSchedule,
    // discrete objective
    pub masked_only: bool,
    pub unmasked_weight: f32,
    pub checkpoint_every: u64,
    /// Pseudo-label iterations; 2 and above refit on model features.
    pub iterations: usize,
    /// Encoder output used for refitting; defaults to the middle layer.
    pub iteration_layer: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::Discrete,
            steps: 2000,
            crop_seconds: 30.0,
            token_budget: 30 * SAMPLE_RATE as usize,
            lr: 5e-4,
            warmup_frac: 0.08,
            grad_clip: 5.0,
            mask: MaskSpec::default(),
            head: HeadConfig::default(),
            target_layers: TargetLayers::All,
            normalize_targets: true,
            loss_kind: LossKind::Mse,
            smooth_l1_beta: 1.0,
            loss_frames: LossFrames::Masked,
            tau: TauSchedule::default(),
            masked_only: true,
            unmasked_weight: 0.0,
            checkpoint_every: 500,
            iterations: 1,
            iteration_layer: None,
        }
    }
}

fn cfg_err(key: &str, detail: impl Into<String>) -> CoreError {
    CoreError::Config {
        path: format!("pretrain.{key}"),
        detail: detail.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(cfg_err("steps", "must be >= 1"));
        }
        if !(self.crop_seconds > 0.0 && self.crop_seconds.is_finite()) {
            return Err(cfg_err("crop_seconds", "must be positive"));
        }
        if (self.token_budget as f64) < self.crop_samples() as f64 {
            return Err(cfg_err(
                "token_budget",
                format!(
                    "{} samples cannot hold one {} s crop",
                    self.token_budget, self.crop_seconds
                ),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(cfg_err("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(cfg_err("warmup_frac", "must lie in [0, 1)"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(cfg_err("grad_clip", "must be >= 0 (0 disables clipping)"));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(cfg_err("smooth_l1_beta", "must be positive"));
        }
        if !(self.unmasked_weight >= 0.0) {
            return Err(cfg_err("unmasked_weight", "must be >= 0"));
        }
        if self.checkpoint_every == 0 {
            return Err(cfg_err("checkpoint_every", "must be >= 1"));
        }
        if self.iterations == 0 {
            return Err(cfg_err("iterations", "must be >= 1"));
        }
        if !(self.head.temperature > 0.0) {
            return Err(cfg_err("head.temperature", "must be positive"));
        }
        self.mask.validate()?;
        self.tau.validate()
    }

    pub fn crop_samples(&self) -> usize {
        (self.crop_seconds * SAMPLE_RATE as f64).round() as usize
    }

    pub fn crops_per_batch(&self) -> usize {
        self.token_budget / self.crop_samples().max(1)
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.steps as f64).ceil() as u64
    }

    /// Learning rate for 1-based `step`: linear warmup to the peak, then
    /// linear decay towards zero at the end of training.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps();
        if step <= w {
            return self.lr * step as f64 / w as f64;
        }
        let remaining = (self.steps + 1).saturating_sub(step) as f64;
        self.lr * remaining / (self.steps + 1 - w) as f64
    }
}

//! Run configuration: one JSON document with every model, training, data,
//! loss and evaluation field explicit. Unknown keys anywhere are errors.

use std::path::Path;

use anyhow::Context;
use ftsp_core::criterion::LossWeights;
use ftsp_core::model::ModelConfig;
use ftsp_core::synthdata::{AugmentConfig, SynthConfig};
use ftsp_core::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: Real,
    pub decay_factor: Real,
    /// Iteration at which the learning rate is multiplied by `decay_factor`.
    pub decay_milestone: usize,
    pub beta1: Real,
    pub beta2: Real,
    pub weight_decay: Real,
    /// Linear learning-rate ramp over the first iterations (0 disables).
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: Real,
    /// Scenes taken from the front of the manifest (0 = all).
    pub train_scenes: usize,
    /// Scenes following the training split, used for curve evaluation.
    pub val_scenes: usize,
    /// Evaluate on the validation split every this many iterations and emit
    /// a curve CSV row (0 = never).
    pub eval_interval: usize,
    /// Write a checkpoint every this many iterations (0 = final only).
    pub checkpoint_interval: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            learning_rate: 1e-4,
            decay_factor: 0.1,
            decay_milestone: 4000,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            warmup_iters: 0,
            batch_size: 1,
            seed: 0,
            grad_clip: 0.0,
            train_scenes: 0,
            val_scenes: 0,
            eval_interval: 0,
            checkpoint_interval: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.iterations >= 1, "iterations must be positive");
        anyhow::ensure!(
            self.decay_milestone < self.iterations,
            "decay milestone must precede the iteration count"
        );
        anyhow::ensure!(self.learning_rate > 0.0 || self.learning_rate == 0.0, "negative learning rate");
        anyhow::ensure!(self.decay_factor > 0.0, "decay factor must be positive");
        anyhow::ensure!(self.batch_size >= 1, "batch size must be positive");
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> Real {
        let base = if iter >= self.decay_milestone {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        };
        if self.warmup_iters > 0 && iter < self.warmup_iters {
            base * (iter + 1) as Real / self.warmup_iters as Real
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Confidence threshold for counting a prediction.
    pub confidence: Real,
    /// Polygon IoU threshold for a detection match.
    pub iou: Real,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            confidence: 0.5,
            iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.train.validate()?;
        cfg.model.validate();
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

//! Optimisation, checkpointing, evaluation, prediction and the ablation suite.

mod ablation;
mod checkpoint;
mod loss;
mod optim;
mod predict;
mod trainer;

pub use ablation::{run_ablation_suite, AblationRow, AblationTable};
pub use checkpoint::{json_diff, save_checkpoint, Checkpoint, CheckpointMeta};
pub use loss::{cross_entropy, one_hot, segmentation_loss, soft_dice, LossKind};
pub use optim::{AdamW, AdamWConfig};
pub use predict::{predict_labels, predict_subject, PredictOptions, PredictOutput};
pub use trainer::{epoch_order, evaluate_runs, pooled_dice, EpochLog, RunMeans, RunSummary, TrainOutcome, Trainer};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the initial rate to zero over all epochs.
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?} (constant, cosine)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub schedule: LrSchedule,
    /// Independent runs (seeds `seed`, `seed + 1`, ...) for evaluation statistics.
    pub runs: usize,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            initial_lr: 1e-5,
            epochs: 30,
            weight_decay: 1e-2,
            seed: 0,
            loss: LossKind::DiceCe,
            schedule: LrSchedule::Constant,
            runs: 5,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.initial_lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.runs < 1 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.initial_lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.initial_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

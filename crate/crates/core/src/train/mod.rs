//! Pretraining and fine-tuning.

mod history;
mod loss;
mod schedule;
mod split;
mod trainer;

pub use history::{History, HistoryRow};
pub use loss::{classification_loss, composite_loss, ntp_loss, ntp_targets};
pub use schedule::{group_learning_rates, llrd_schedule};
pub use split::{few_shot_subsample, split_dataset, split_indices, Split};
pub use trainer::{finetune, pretrain, EpochReport, StepReport, TrainOutcome, Trainer};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::ShiftError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: usize,
    /// Base learning rate; per-layer rates decay from it when fine-tuning.
    pub lr: f64,
    pub aux_weight: f64,
    pub llrd_decay: f64,
    pub patience: usize,
    /// Train, validation and test proportions.
    pub split: [f64; 3],
    pub weight_decay: f64,
    pub seed: u64,
    /// Stops after this many optimizer steps in total.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            mode: TrainMode::Pretrain,
            batch_size: 32,
            epochs: 8,
            lr: 3e-4,
            aux_weight: 0.02,
            llrd_decay: 0.9,
            patience: 5,
            split: [8.0, 1.0, 1.0],
            weight_decay: 0.01,
            seed: 0,
            max_steps: None,
        }
    }

    pub fn finetune() -> Self {
        Self {
            mode: TrainMode::Finetune,
            epochs: 40,
            lr: 5e-5,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return fail(format!("aux_weight {} must be finite and non-negative", self.aux_weight));
        }
        if !(self.llrd_decay > 0.0 && self.llrd_decay <= 1.0) {
            return fail(format!("llrd_decay {} must lie in (0, 1]", self.llrd_decay));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.split.iter().any(|r| !(*r >= 0.0 && r.is_finite())) || self.split.iter().sum::<f64>() <= 0.0 {
            return fail(format!("split ratios {:?} must be non-negative with a positive sum", self.split));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Shift(#[from] ShiftError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

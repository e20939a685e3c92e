use serde::{Deserialize, Serialize};

use crate::backend::transformer::BACKBONE_PREFIXES;
use crate::error::{Error, Result};
use crate::prompt::bank::PROMPT_PREFIX;
use crate::task::TaskKind;

/// Task-specific heads are freshly initialized and always trained.
pub const HEAD_PREFIXES: [&str; 2] = ["decoder.", "head."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    PromptsOnly,
    #[default]
    PromptsAndPlm,
    PlmOnly,
}

impl TrainableSet {
    /// Parameter name prefixes updated under this setting.
    pub fn prefixes(self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self != TrainableSet::PlmOnly {
            out.push(PROMPT_PREFIX);
        }
        if self != TrainableSet::PromptsOnly {
            out.extend(BACKBONE_PREFIXES);
        }
        out.extend(HEAD_PREFIXES);
        out
    }
}

fn default_lr() -> f64 {
    3e-5
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` means one epoch worth of updates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trainable_set: TrainableSet,
}

impl TrainConfig {
    pub fn classification() -> Self {
        Self {
            base_lr: default_lr(),
            batch_size: 10,
            epochs: 20,
            warmup_steps: None,
            weight_decay: default_weight_decay(),
            clip_norm: default_clip(),
            seed: 0,
            trainable_set: TrainableSet::default(),
        }
    }

    pub fn generative() -> Self {
        Self {
            batch_size: 20,
            epochs: 15,
            ..Self::classification()
        }
    }

    /// Continual masked-language-model pre-training.
    pub fn mlm() -> Self {
        Self {
            batch_size: 8,
            epochs: 3,
            trainable_set: TrainableSet::PlmOnly,
            ..Self::classification()
        }
    }

    pub fn for_task(task: TaskKind) -> Self {
        if task.is_classification() {
            Self::classification()
        } else {
            Self::generative()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::Config("weight_decay and clip_norm must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }

    /// `(warmup, total)` update counts for a training set of `examples`.
    pub fn schedule(&self, examples: usize) -> (usize, usize) {
        let per_epoch = self.steps_per_epoch(examples);
        (self.warmup_steps.unwrap_or(per_epoch), per_epoch * self.epochs)
    }
}

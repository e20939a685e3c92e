//! Optimization: schedule, AdamW, the shared loop and its task objectives.

pub mod baseline;
pub mod classifier;
pub mod config;
pub mod fit;
pub mod generator;
pub mod mlm;
pub mod optim;
pub mod schedule;

pub use baseline::{finetune_baseline, Baseline, BaselineClassifier, BaselineMode};
pub use classifier::{train_classifier, LabeledInput, PromptClassifier};
pub use config::{TrainConfig, TrainableSet};
pub use fit::{derive_seed, fit, EpochLog, Objective, Selection, StepLog, TrainOutcome};
pub use generator::{train_generator, GenerativeInput, PromptGenerator};
pub use mlm::{continual_mlm_pretrain, MarkedCode, MlmPretraining};
pub use optim::{AdamW, OptimizerState};
pub use schedule::lr_at;

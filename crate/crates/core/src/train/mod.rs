//! Optimizer, masked-LM pretraining, fine-tuning and evaluation.

mod config;
mod finetune;
mod metrics;
mod mlm;
mod optim;

pub use config::{Precision, TrainConfig, DEFAULT_REFRESH_EVERY};
pub use finetune::{evaluate_classifier, finetune, Evaluation, FinetuneReport, LabeledSeq};
pub use metrics::{argmax, classification_metrics, ClassMetrics};
pub use mlm::{mlm_loss, pretrain_mlm, BatchSampler, MlmLoss, MlmTrainer, StepStats, TrainReport};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState};

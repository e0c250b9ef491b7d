//! Policy-gradient fine-tuning against the copyright reward.

mod config;
mod objective;
mod reward;
mod train;

pub use config::{AnchorPolicy, RewardConfig, RewardMode, TrainConfig};
pub use objective::{
    kl_regularizer, objective_estimate, surrogate_loss, surrogate_terms, total_loss, Episode, LossAndGrad, StepTerm,
};
pub use reward::{reward, RewardModel};
pub use train::{finetune, AbortDiagnostic, FinetuneOutcome, IterationRecord, TrainLog};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::MetricWeights;
use crate::optim::OptimizerKind;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Weighted raw distance to the closest anchor; larger is better.
    #[default]
    Distance,
    /// Negated combined score of the most similar anchor.
    NegCl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Copyrighted records sharing the episode's prompt.
    #[default]
    MinOverPromptAnchors,
    /// Every copyrighted record in the corpus.
    MinOverAllCopyright,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mode: RewardMode,
    pub anchor_policy: AnchorPolicy,
    /// Reward for episodes whose anchor set is empty.
    pub fallback_reward: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            mode: RewardMode::Distance,
            anchor_policy: AnchorPolicy::MinOverPromptAnchors,
            fallback_reward: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn weights<T: Scalar>(&self) -> MetricWeights<T> {
        MetricWeights {
            alpha: T::lit(self.alpha),
            beta: T::lit(self.beta),
            clamp_cl_perc_nonnegative: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights::<f64>().validate()?;
        if !self.fallback_reward.is_finite() {
            return Err(Error::invalid("fallback_reward must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub samples_per_iteration: usize,
    pub grad_updates_per_iteration: usize,
    pub clip_range: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 8,
            samples_per_iteration: 32,
            grad_updates_per_iteration: 4,
            clip_range: 1e-4,
            lambda: 0.1,
            iterations: 50,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::Validation(format!("train.{key}: {msg}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive");
        }
        if self.samples_per_iteration == 0 {
            return fail("samples_per_iteration", "must be positive");
        }
        if self.batch_size > self.samples_per_iteration {
            return fail("batch_size", "cannot exceed samples_per_iteration");
        }
        if self.grad_updates_per_iteration == 0 {
            return fail("grad_updates_per_iteration", "must be positive");
        }
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return fail("clip_range", "must lie in (0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda", "must be a finite value >= 0");
        }
        if self.iterations == 0 {
            return fail("iterations", "must be positive");
        }
        Ok(())
    }
}

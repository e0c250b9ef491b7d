//! The fine-tuning loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{RewardConfig, TrainConfig};
use super::objective::{batch_loss, reference_means, Episode, Reference};
use super::reward::RewardModel;
use crate::dataset::CorpusManifest;
use crate::diffusion::{sample_trajectory, Denoiser, NoiseSchedule};
use crate::encoders::ConvEncoder;
use crate::error::{Error, Result};
use crate::optim::make_optimizer;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::{sq_norm, Scalar};

/// Averages over the iteration's gradient updates, except `mean_reward`
/// which covers every sampled episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub surrogate: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration,mean_reward,mean_kl,surrogate,total_loss,grad_norm,seconds";

    fn render(&self, with_time: bool) -> String {
        let mut s = String::new();
        if with_time {
            s.push_str(Self::HEADER);
        } else {
            s.push_str(Self::HEADER.trim_end_matches(",seconds"));
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                r.iteration, r.mean_reward, r.mean_kl, r.surrogate, r.total_loss, r.grad_norm
            );
            if with_time {
                let _ = write!(s, ",{:.3}", r.seconds);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        self.render(true)
    }

    /// The CSV without the wall-clock column; a pure function of the inputs.
    pub fn to_csv_deterministic(&self) -> String {
        self.render(false)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Why training stopped early. Parameters were restored to the start of
/// `iteration`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbortDiagnostic {
    pub iteration: usize,
    pub update: usize,
    pub surrogate: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    pub model: Denoiser<T>,
    pub log: TrainLog,
    pub abort: Option<AbortDiagnostic>,
}

/// Runs `tcfg.iterations` rounds of sample → reward → clipped updates,
/// starting from and regularized toward `pretrained`.
pub fn finetune<T: Scalar>(
    pretrained: &Denoiser<T>,
    manifest: &CorpusManifest<T>,
    encoder: &ConvEncoder<T>,
    schedule: &NoiseSchedule<T>,
    rcfg: &RewardConfig,
    tcfg: &TrainConfig,
) -> Result<FinetuneOutcome<T>> {
    tcfg.validate()?;
    rcfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::invalid("fine-tuning needs a non-empty corpus for prompts"));
    }
    pretrained.check_schedule(schedule)?;
    let shape = pretrained.arch().image_shape;
    if encoder.input_shape() != shape {
        return Err(Error::Shape {
            expected: shape,
            actual: encoder.input_shape(),
        });
    }
    let rewards = RewardModel::new(manifest, encoder, rcfg)?;
    let clip = T::lit(tcfg.clip_range);
    let lambda = T::lit(tcfg.lambda);
    let mut model = pretrained.clone();
    let mut opt = make_optimizer(tcfg.optimizer, T::lit(tcfg.learning_rate), model.param_count());
    let mut log = TrainLog::default();

    for it in 0..tcfg.iterations {
        let start = Instant::now();
        let mut rng = rng_from_seed(derive_seed(tcfg.seed, it as u64));
        let jobs: Vec<(String, u64)> = (0..tcfg.samples_per_iteration)
            .map(|_| {
                let r = &manifest.records[rng.random_range(0..manifest.len())];
                (r.prompt.clone(), rng.random::<u64>())
            })
            .collect();
        let old: &Denoiser<T> = &model;
        let episodes: Vec<Episode<T>> = jobs
            .par_iter()
            .map(|(prompt, seed)| {
                let trajectory = sample_trajectory(old, schedule, prompt, *seed)?;
                let reward = rewards.reward(&trajectory.image(shape)?, prompt)?;
                Ok(Episode { trajectory, reward })
            })
            .collect::<Result<_>>()?;
        let ref_means: Vec<Vec<Vec<T>>> = if tcfg.lambda > 0.0 {
            episodes
                .par_iter()
                .map(|e| reference_means(pretrained, schedule, &e.trajectory))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mean_reward = episodes.iter().map(|e| e.reward.as_f64()).sum::<f64>() / episodes.len() as f64;

        let snapshot = model.params().to_vec();
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        order.shuffle(&mut rng);
        let (mut s_sum, mut k_sum, mut l_sum, mut g_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut abort = None;
        for u in 0..tcfg.grad_updates_per_iteration {
            let batch: Vec<(&Episode<T>, Reference<'_, T>)> = (0..tcfg.batch_size)
                .map(|j| {
                    let i = order[(u * tcfg.batch_size + j) % order.len()];
                    let r = if ref_means.is_empty() {
                        Reference::None
                    } else {
                        Reference::Cached(&ref_means[i])
                    };
                    (&episodes[i], r)
                })
                .collect();
            let (surr, kl, grad) = batch_loss(&model, schedule, &batch, clip, lambda, true)?;
            // with λ = 0 the KL is still reported, just not weighted
            let kl = if ref_means.is_empty() {
                let items: Vec<_> = batch.iter().map(|(e, _)| (*e, Reference::Model(pretrained))).collect();
                batch_loss(&model, schedule, &items, clip, T::zero(), false)?.1
            } else {
                kl
            };
            let total = surr + lambda * kl;
            let gn = sq_norm(&grad).sqrt();
            if !(total.is_finite() && gn.is_finite()) {
                abort = Some(AbortDiagnostic {
                    iteration: it + 1,
                    update: u + 1,
                    surrogate: surr.as_f64(),
                    kl: kl.as_f64(),
                    grad_norm: gn.as_f64(),
                    message: "non-finite loss or gradient".into(),
                });
                break;
            }
            opt.step(model.params_mut(), &grad);
            if !model.is_finite() {
                abort = Some(AbortDiagnostic {
                    iteration: it + 1,
                    update: u + 1,
                    surrogate: surr.as_f64(),
                    kl: kl.as_f64(),
                    grad_norm: gn.as_f64(),
                    message: "parameters became non-finite".into(),
                });
                break;
            }
            s_sum += surr.as_f64();
            k_sum += kl.as_f64();
            l_sum += total.as_f64();
            g_sum += gn.as_f64();
        }
        if let Some(diag) = abort {
            model.params_mut().copy_from_slice(&snapshot);
            return Ok(FinetuneOutcome {
                model,
                log,
                abort: Some(diag),
            });
        }
        let n = tcfg.grad_updates_per_iteration as f64;
        log.records.push(IterationRecord {
            iteration: it + 1,
            mean_reward,
            mean_kl: k_sum / n,
            surrogate: s_sum / n,
            total_loss: l_sum / n,
            grad_norm: g_sum / n,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(FinetuneOutcome {
        model,
        log,
        abort: None,
    })
}

//! Standard ε-prediction regression that produces the base model.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::sampling::to_model_space;
use super::schedule::{forward_sample, NoiseSchedule};
use crate::dataset::CorpusManifest;
use crate::error::{Error, Result};
use crate::optim::{make_optimizer, OptimizerKind};
use crate::rng::{derive_seed, normal_vec, rng_from_seed};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Independent (t, ε) draws per image per epoch.
    pub draws_per_image: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 5e-3,
            batch_size: 16,
            draws_per_image: 8,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.draws_per_image == 0 {
            return Err(Error::invalid(
                "pretrain epochs, batch_size and draws_per_image must be positive",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("pretrain learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub epochs: Vec<f64>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epochs.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, l));
        }
        s
    }

    pub fn first(&self) -> Option<f64> {
        self.epochs.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().copied()
    }
}

struct Example<T> {
    record: usize,
    t: usize,
    noise: Vec<T>,
}

/// `mean_k (ε̂_k − ε_k)²` for one example; accumulates its gradient scaled by `scale`.
fn example_loss<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule<T>,
    x0: &[T],
    prompt_emb: &[T],
    ex: &Example<T>,
    scale: T,
    grad: &mut [T],
) -> Result<T> {
    let xt = forward_sample(schedule, x0, ex.t, &ex.noise)?;
    let fwd = model.forward(schedule, &xt, ex.t, prompt_emb)?;
    let n = T::lit(x0.len() as f64);
    let diff: Vec<T> = fwd.eps.iter().zip(&ex.noise).map(|(&a, &b)| a - b).collect();
    let loss = diff.iter().map(|&v| v * v).sum::<T>() / n;
    let two = T::lit(2.0);
    let d_eps: Vec<T> = diff.iter().map(|&v| two * v / n * scale).collect();
    model.backward(&fwd, &d_eps, grad);
    Ok(loss)
}

/// Trains `model` in place and returns the per-epoch loss curve.
pub fn pretrain<T: Scalar>(
    model: &mut Denoiser<T>,
    corpus: &CorpusManifest<T>,
    schedule: &NoiseSchedule<T>,
    cfg: &PretrainConfig,
) -> Result<LossCurve> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("cannot pretrain on an empty corpus"));
    }
    model.check_schedule(schedule)?;
    let shape = model.arch().image_shape;
    if corpus.image_shape != shape {
        return Err(Error::Shape {
            expected: shape,
            actual: corpus.image_shape,
        });
    }
    let inputs: Vec<Vec<T>> = corpus.records.iter().map(|r| to_model_space(r.pixels.data())).collect();
    let prompts: Vec<Vec<T>> = corpus
        .records
        .iter()
        .map(|r| model.prompt_embedding(&r.prompt))
        .collect();
    let d = model.arch().pixels();
    let steps = schedule.steps();
    let mut opt = make_optimizer(cfg.optimizer, T::lit(cfg.learning_rate), model.param_count());
    let mut curve = LossCurve::default();

    for epoch in 0..cfg.epochs {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..inputs.len())
            .flat_map(|i| std::iter::repeat_n(i, cfg.draws_per_image))
            .collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example<T>> = chunk
                .iter()
                .map(|&record| Example {
                    record,
                    t: rng.random_range(1..=steps),
                    noise: normal_vec(&mut rng, d),
                })
                .collect();
            let scale = T::one() / T::lit(batch.len() as f64);
            let m: &Denoiser<T> = model;
            let parts: Vec<(T, Vec<T>)> = batch
                .par_iter()
                .map(|ex| {
                    let mut g = vec![T::zero(); m.param_count()];
                    let l = example_loss(m, schedule, &inputs[ex.record], &prompts[ex.record], ex, scale, &mut g)?;
                    Ok((l, g))
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![T::zero(); model.param_count()];
            for (l, g) in &parts {
                total += l.as_f64();
                for (a, &b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            opt.step(model.params_mut(), &grad);
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::NonFinite(format!("pretraining diverged in epoch {}", epoch + 1)));
        }
        curve.epochs.push(mean);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::toy::{generate, ToyCorpusSpec};
    use crate::diffusion::denoiser::DenoiserArch;
    use crate::diffusion::schedule::make_schedule;

    fn setup(n: usize) -> (Denoiser<f64>, CorpusManifest<f64>, NoiseSchedule<f64>) {
        let shape = (8, 8, 3);
        let spec = ToyCorpusSpec {
            shape,
            n_copyright: n / 2,
            n_noncopyright: n - n / 2,
            ..ToyCorpusSpec::default()
        };
        let toy = generate::<f64>(&spec).unwrap();
        let mut records = toy.copyright.records;
        records.extend(toy.noncopyright.records);
        let corpus = CorpusManifest::from_records(records, shape, 0).unwrap();
        let arch = DenoiserArch {
            image_shape: shape,
            hidden: 8,
            template_hidden: 2,
            steps: 10,
            ..DenoiserArch::default()
        };
        (
            Denoiser::new(arch, 1).unwrap(),
            corpus,
            make_schedule(10, 1e-4, 0.02).unwrap(),
        )
    }

    #[test]
    fn smoke_and_determinism() {
        let (m0, corpus, s) = setup(8);
        let cfg = PretrainConfig {
            epochs: 1,
            ..PretrainConfig::default()
        };
        let mut a = m0.clone();
        let ca = pretrain(&mut a, &corpus, &s, &cfg).unwrap();
        assert_eq!(ca.epochs.len(), 1);
        assert!(ca.epochs[0].is_finite());
        let mut b = m0.clone();
        let cb = pretrain(&mut b, &corpus, &s, &cfg).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases() {
        let (mut m, corpus, s) = setup(40);
        let cfg = PretrainConfig {
            epochs: 10,
            ..PretrainConfig::default()
        };
        let c = pretrain(&mut m, &corpus, &s, &cfg).unwrap();
        assert!(c.last().unwrap() < c.first().unwrap(), "{:?}", c.epochs);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let (mut m, _, s) = setup(8);
        let empty = CorpusManifest {
            records: vec![],
            p_c: 0.0,
            seed: 0,
            image_shape: (8, 8, 3),
            sampled_with_replacement: false,
        };
        assert!(pretrain(&mut m, &empty, &s, &PretrainConfig::default()).is_err());
    }
}

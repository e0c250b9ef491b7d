//! Reverse-chain transitions, their log-densities, and full rollouts.

use std::f64::consts::PI;

use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::{normal_vec, rng_from_seed};
use crate::scalar::Scalar;

/// Pixels in `[0, 1]` map to model space `[-1, 1]`.
pub fn to_model_space<T: Scalar>(pixels: &[T]) -> Vec<T> {
    let two = T::lit(2.0);
    pixels.iter().map(|&p| p * two - T::one()).collect()
}

/// Inverse of [`to_model_space`], clamped to `[0, 1]`.
pub fn to_pixel_space<T: Scalar>(shape: Shape, x: &[T]) -> Result<Image<T>> {
    let half = T::lit(0.5);
    let data = x
        .iter()
        .map(|&v| ((v + T::one()) * half).max(T::zero()).min(T::one()))
        .collect();
    Image::from_vec(shape, data)
}

/// Isotropic Gaussian `N(mean, std²·I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian<T> {
    pub mean: Vec<T>,
    pub std: T,
}

/// `(x_t − β_t/sqrt(1−ᾱ_t)·ε̂) / sqrt(1−β_t)`
pub fn posterior_mean<T: Scalar>(schedule: &NoiseSchedule<T>, x_t: &[T], t: usize, eps: &[T]) -> Vec<T> {
    let b = schedule.beta(t);
    let k = b / (T::one() - schedule.alpha_bar(t)).sqrt();
    let inv = T::one() / (T::one() - b).sqrt();
    x_t.iter().zip(eps).map(|(&x, &e)| (x - k * e) * inv).collect()
}

/// `p_θ(x_{t−1} | x_t, c)` with fixed variance `β_t`.
pub fn reverse_step_distribution<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule<T>,
    x_t: &[T],
    t: usize,
    prompt: &str,
) -> Result<Gaussian<T>> {
    let eps = model.predict_noise(schedule, x_t, t, prompt)?;
    Ok(Gaussian {
        mean: posterior_mean(schedule, x_t, t, &eps),
        std: schedule.sigma(t),
    })
}

/// Exact log-density of a diagonal Gaussian with shared std.
pub fn step_logprob<T: Scalar>(dist: &Gaussian<T>, x_prev: &[T]) -> Result<T> {
    if !(dist.std > T::zero()) {
        return Err(Error::invalid(format!(
            "standard deviation must be positive, got {}",
            dist.std
        )));
    }
    if dist.mean.len() != x_prev.len() {
        return Err(Error::Dimension {
            left: dist.mean.len(),
            right: x_prev.len(),
        });
    }
    Ok(gaussian_logprob(&dist.mean, dist.std, x_prev))
}

pub(crate) fn gaussian_logprob<T: Scalar>(mean: &[T], std: T, x: &[T]) -> T {
    let two = T::lit(2.0);
    let var2 = two * std * std;
    let norm = std.ln() + T::lit(0.5 * (2.0 * PI).ln());
    let mut acc = T::zero();
    for (&m, &v) in mean.iter().zip(x) {
        let d = v - m;
        acc += d * d / var2 + norm;
    }
    -acc
}

/// One reverse-diffusion episode. `states[0]` is `x_T`, `states[T]` is `x_0`;
/// `logprobs[i]` is the log-density of `states[i+1]` given `states[i]`, i.e.
/// of the transition at timestep `T − i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub prompt: String,
    pub states: Vec<Vec<T>>,
    pub logprobs: Vec<T>,
    pub seed: u64,
}

impl<T: Scalar> Trajectory<T> {
    pub fn steps(&self) -> usize {
        self.logprobs.len()
    }

    /// `x_t` for `t` in `0..=T`.
    pub fn state(&self, t: usize) -> &[T] {
        &self.states[self.steps() - t]
    }

    pub fn final_state(&self) -> &[T] {
        self.states.last().expect("trajectory has states")
    }

    /// The generated sample as a `[0, 1]` image.
    pub fn image(&self, shape: Shape) -> Result<Image<T>> {
        to_pixel_space(shape, self.final_state())
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().flatten().all(|v| v.is_finite()) && self.logprobs.iter().all(|v| v.is_finite())
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)`, recording every transition's
/// log-probability. The final step is stochastic as well.
pub fn sample_trajectory<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule<T>,
    prompt: &str,
    seed: u64,
) -> Result<Trajectory<T>> {
    model.check_schedule(schedule)?;
    let steps = schedule.steps();
    let d = model.arch().pixels();
    let pe = model.prompt_embedding(prompt);
    let mut rng = rng_from_seed(seed);
    let mut states = Vec::with_capacity(steps + 1);
    let mut logprobs = Vec::with_capacity(steps);
    states.push(normal_vec::<T, _>(&mut rng, d));
    for t in (1..=steps).rev() {
        let x_t = states.last().unwrap();
        let eps = model.forward(schedule, x_t, t, &pe)?.eps;
        let mean = posterior_mean(schedule, x_t, t, &eps);
        let std = schedule.sigma(t);
        let z: Vec<T> = normal_vec(&mut rng, d);
        let x_prev: Vec<T> = mean.iter().zip(&z).map(|(&m, &zi)| m + std * zi).collect();
        logprobs.push(gaussian_logprob(&mean, std, &x_prev));
        states.push(x_prev);
    }
    Ok(Trajectory {
        prompt: prompt.to_string(),
        states,
        logprobs,
        seed,
    })
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The three numbers that determine a linear schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear β schedule with cumulative products. Timesteps are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    params: ScheduleParams,
    betas: Vec<T>,
    alpha_bars: Vec<T>,
    sigmas: Vec<T>,
}

pub fn make_schedule<T: Scalar>(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule<T>> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<T> = (0..steps)
        .map(|i| {
            let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            T::lit(beta_start + (beta_end - beta_start) * f)
        })
        .collect();
    let mut acc = T::one();
    let alpha_bars = betas
        .iter()
        .map(|&b| {
            acc *= T::one() - b;
            acc
        })
        .collect();
    let sigmas = betas.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        params: ScheduleParams {
            steps,
            beta_start,
            beta_end,
        },
        betas,
        alpha_bars,
        sigmas,
    })
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        make_schedule(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bars[t - 1]
    }

    /// Reverse-step standard deviation `sqrt(β_t)`.
    pub fn sigma(&self, t: usize) -> T {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    /// `∂μ/∂ε̂` of the posterior-mean formula: `−β_t / (sqrt(1−ᾱ_t)·sqrt(1−β_t))`.
    pub fn mean_eps_coef(&self, t: usize) -> T {
        let b = self.beta(t);
        -b / ((T::one() - self.alpha_bar(t)).sqrt() * (T::one() - b).sqrt())
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·noise`
pub fn forward_sample<T: Scalar>(schedule: &NoiseSchedule<T>, x0: &[T], t: usize, noise: &[T]) -> Result<Vec<T>> {
    schedule.check_step(t)?;
    if x0.len() != noise.len() {
        return Err(Error::Dimension {
            left: x0.len(),
            right: noise.len(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(&x, &n)| a * x + b * n).collect())
}

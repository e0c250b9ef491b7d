//! Clipped importance-sampled surrogate, KL-to-reference penalty and their
//! analytic gradients.
//!
//! Per-step terms are summed over the `T` steps of an episode and averaged
//! over episodes, so at `θ = θ_old` the surrogate equals `−T·mean(r)`.

use rayon::prelude::*;

use crate::diffusion::sampling::gaussian_logprob;
use crate::diffusion::{posterior_mean, Denoiser, NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A trajectory sampled under `θ_old` with its terminal reward. The stored
/// log-probabilities stand in for `θ_old`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    pub trajectory: Trajectory<T>,
    pub reward: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad<T> {
    pub value: T,
    pub grad: Vec<T>,
}

/// One step's contribution to the (un-negated) surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTerm<T> {
    pub ratio: T,
    pub unclipped: T,
    pub clipped: T,
    pub term: T,
}

/// Monte Carlo estimate of the expected reward.
pub fn objective_estimate<T: Scalar>(rewards: &[T]) -> Result<T> {
    if rewards.is_empty() {
        return Err(Error::invalid("objective estimate needs at least one reward"));
    }
    Ok(rewards.iter().copied().sum::<T>() / T::lit(rewards.len() as f64))
}

/// `surrogate + λ·kl`
pub fn total_loss<T: Scalar>(surrogate: T, kl: T, lambda: T) -> T {
    surrogate + lambda * kl
}

fn clip_term<T: Scalar>(ratio: T, reward: T, clip: T) -> StepTerm<T> {
    if reward == T::zero() {
        return StepTerm {
            ratio,
            unclipped: T::zero(),
            clipped: T::zero(),
            term: T::zero(),
        };
    }
    let clamped = ratio.max(T::one() - clip).min(T::one() + clip);
    let unclipped = ratio * reward;
    let clipped = clamped * reward;
    StepTerm {
        ratio,
        unclipped,
        clipped,
        term: unclipped.min(clipped),
    }
}

fn check_trajectory<T: Scalar>(schedule: &NoiseSchedule<T>, tr: &Trajectory<T>, d: usize) -> Result<()> {
    let steps = schedule.steps();
    if tr.logprobs.len() != steps || tr.states.len() != steps + 1 {
        return Err(Error::Incompatible(format!(
            "trajectory has {} steps, schedule {}",
            tr.logprobs.len(),
            steps
        )));
    }
    if let Some(s) = tr.states.iter().find(|s| s.len() != d) {
        return Err(Error::Dimension {
            left: d,
            right: s.len(),
        });
    }
    Ok(())
}

/// Where the KL reference means come from.
#[derive(Clone, Copy)]
pub(crate) enum Reference<'a, T> {
    None,
    Model(&'a Denoiser<T>),
    /// `means[i]` is the reference mean at `states[i]`.
    Cached(&'a [Vec<T>]),
}

/// Reference-model means at every non-terminal state of `tr`.
pub(crate) fn reference_means<T: Scalar>(
    reference: &Denoiser<T>,
    schedule: &NoiseSchedule<T>,
    tr: &Trajectory<T>,
) -> Result<Vec<Vec<T>>> {
    let pe = reference.prompt_embedding(&tr.prompt);
    let steps = schedule.steps();
    (0..steps)
        .map(|i| {
            let t = steps - i;
            let eps = reference.forward(schedule, &tr.states[i], t, &pe)?.eps;
            Ok(posterior_mean(schedule, &tr.states[i], t, &eps))
        })
        .collect()
}

/// Sums of one episode's surrogate terms and KL terms; accumulates
/// `s_surr·∂(Σ term)/∂θ + s_kl·∂(Σ kl)/∂θ` into `grad`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn episode_pass<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule<T>,
    trajectory: &Trajectory<T>,
    reward: T,
    clip: T,
    reference: Reference<'_, T>,
    s_surr: T,
    s_kl: T,
    grad: Option<&mut [T]>,
) -> Result<(T, T)> {
    let steps = schedule.steps();
    let pe = model.prompt_embedding(&trajectory.prompt);
    let mut grad = grad;
    let (mut surr, mut kl) = (T::zero(), T::zero());
    let half = T::lit(0.5);
    for i in 0..steps {
        let t = steps - i;
        let x_t = &trajectory.states[i];
        let x_prev = &trajectory.states[i + 1];
        let fwd = model.forward(schedule, x_t, t, &pe)?;
        let mu = posterior_mean(schedule, x_t, t, &fwd.eps);
        let sigma = schedule.sigma(t);
        let var = sigma * sigma;
        let coef = schedule.mean_eps_coef(t);
        let mut d_mu = vec![T::zero(); mu.len()];
        let mut active = false;

        if s_surr != T::zero() || grad.is_none() {
            let lp = gaussian_logprob(&mu, sigma, x_prev);
            let st = clip_term((lp - trajectory.logprobs[i]).exp(), reward, clip);
            surr += st.term;
            if reward != T::zero() && st.unclipped <= st.clipped && s_surr != T::zero() {
                let k = s_surr * reward * st.ratio / var;
                for ((d, &m), &x) in d_mu.iter_mut().zip(&mu).zip(x_prev) {
                    *d += k * (x - m);
                }
                active = true;
            }
        }
        let pre_owned;
        let pre: Option<&[T]> = match reference {
            Reference::None => None,
            Reference::Model(r) => {
                let eps = r
                    .forward(schedule, x_t, t, &r.prompt_embedding(&trajectory.prompt))?
                    .eps;
                pre_owned = posterior_mean(schedule, x_t, t, &eps);
                Some(&pre_owned)
            }
            Reference::Cached(m) => Some(&m[i]),
        };
        if let Some(pre) = pre {
            let mut sq = T::zero();
            for (&a, &b) in mu.iter().zip(pre) {
                sq += (a - b) * (a - b);
            }
            kl += half * sq / var;
            if s_kl != T::zero() {
                let k = s_kl / var;
                for ((d, &a), &b) in d_mu.iter_mut().zip(&mu).zip(pre) {
                    *d += k * (a - b);
                }
                active = true;
            }
        }
        if let (true, Some(g)) = (active, grad.as_deref_mut()) {
            let d_eps: Vec<T> = d_mu.iter().map(|&v| v * coef).collect();
            model.backward(&fwd, &d_eps, g);
        }
    }
    Ok((surr, kl))
}

/// Per-step terms of one episode, for inspecting the clipping.
pub fn surrogate_terms<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule<T>,
    episode: &Episode<T>,
    clip: T,
) -> Result<Vec<StepTerm<T>>> {
    model.check_schedule(schedule)?;
    check_trajectory(schedule, &episode.trajectory, model.arch().pixels())?;
    let tr = &episode.trajectory;
    let pe = model.prompt_embedding(&tr.prompt);
    let steps = schedule.steps();
    (0..steps)
        .map(|i| {
            let t = steps - i;
            let eps = model.forward(schedule, &tr.states[i], t, &pe)?.eps;
            let mu = posterior_mean(schedule, &tr.states[i], t, &eps);
            let lp = gaussian_logprob(&mu, schedule.sigma(t), &tr.states[i + 1]);
            Ok(clip_term((lp - tr.logprobs[i]).exp(), episode.reward, clip))
        })
        .collect()
}

/// Fused `surrogate + λ·KL` over a minibatch. Returns the surrogate, the KL
/// and the gradient of the total. Per-episode gradients are reduced in
/// batch order.
pub(crate) fn batch_loss<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule<T>,
    batch: &[(&Episode<T>, Reference<'_, T>)],
    clip: T,
    lambda: T,
    with_surrogate: bool,
) -> Result<(T, T, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    model.check_schedule(schedule)?;
    let d = model.arch().pixels();
    for (ep, _) in batch {
        check_trajectory(schedule, &ep.trajectory, d)?;
    }
    let n = T::lit(batch.len() as f64);
    let s_surr = if with_surrogate { -T::one() / n } else { T::zero() };
    let s_kl = lambda / n;
    let parts: Vec<(T, T, Vec<T>)> = batch
        .par_iter()
        .map(|(ep, reference)| {
            let mut g = vec![T::zero(); model.param_count()];
            let (s, k) = episode_pass(
                model,
                schedule,
                &ep.trajectory,
                ep.reward,
                clip,
                *reference,
                s_surr,
                s_kl,
                Some(&mut g),
            )?;
            Ok((s, k, g))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![T::zero(); model.param_count()];
    let (mut surr, mut kl) = (T::zero(), T::zero());
    for (s, k, g) in parts {
        surr += s;
        kl += k;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((-surr / n, kl / n, grad))
}

/// `−(1/N)·Σ_episodes Σ_t min(ρ_t·r, clamp(ρ_t, 1−ε, 1+ε)·r)` and its
/// gradient with respect to `model`'s parameters.
pub fn surrogate_loss<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule<T>,
    batch: &[Episode<T>],
    clip: T,
) -> Result<LossAndGrad<T>> {
    if !(clip > T::zero() && clip < T::one()) {
        return Err(Error::invalid("clip range must lie in (0, 1)"));
    }
    let items: Vec<_> = batch.iter().map(|e| (e, Reference::None)).collect();
    let (value, _, grad) = batch_loss(model, schedule, &items, clip, T::zero(), true)?;
    Ok(LossAndGrad { value, grad })
}

/// Mean over trajectories of `Σ_t ‖μ_θ − μ_ref‖² / (2σ_t²)` at the visited
/// states, and its gradient with respect to `model` (the reference is frozen).
pub fn kl_regularizer<T: Scalar>(
    model: &Denoiser<T>,
    reference: &Denoiser<T>,
    schedule: &NoiseSchedule<T>,
    trajectories: &[Trajectory<T>],
) -> Result<LossAndGrad<T>> {
    if model.arch() != reference.arch() {
        return Err(Error::Incompatible("model and reference architectures differ".into()));
    }
    reference.check_schedule(schedule)?;
    let episodes: Vec<Episode<T>> = trajectories
        .iter()
        .map(|t| Episode {
            trajectory: t.clone(),
            reward: T::zero(),
        })
        .collect();
    let items: Vec<_> = episodes.iter().map(|e| (e, Reference::Model(reference))).collect();
    let (_, value, grad) = batch_loss(model, schedule, &items, T::lit(0.5), T::one(), false)?;
    Ok(LossAndGrad { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, sample_trajectory, DenoiserArch};
    use crate::rng::{normal, rng_from_seed};

    fn tiny() -> (Denoiser<f64>, NoiseSchedule<f64>) {
        let arch = DenoiserArch {
            image_shape: (2, 2, 1),
            hidden: 3,
            template_hidden: 2,
            time_dim: 2,
            prompt_dim: 4,
            prompt_seed: 0,
            steps: 2,
            sigma_data: 0.5,
        };
        (Denoiser::new(arch, 4).unwrap(), make_schedule(2, 0.05, 0.1).unwrap())
    }

    #[test]
    fn objective_examples() {
        assert_eq!(objective_estimate(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(objective_estimate(&[0.0, 2.0]).unwrap(), 1.0);
        assert!(objective_estimate::<f64>(&[]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(-2.0, 4.0, 0.5), 0.0);
        assert_eq!(total_loss(-2.0, 4.0, 0.0), -2.0);
        assert!(total_loss(1.0, 3.0, 0.2) > total_loss(1.0, 2.0, 0.2));
    }

    #[test]
    fn surrogate_at_old_params_is_step_sum() {
        let (m, s) = tiny();
        let ep = Episode {
            trajectory: sample_trajectory(&m, &s, "c", 1).unwrap(),
            reward: 3.0,
        };
        let l = surrogate_loss(&m, &s, &[ep], 1e-4).unwrap();
        assert!((l.value + 6.0).abs() < 1e-12, "{}", l.value);
    }

    #[test]
    fn zero_reward_gives_zero_loss_anywhere() {
        let (m, s) = tiny();
        let ep = Episode {
            trajectory: sample_trajectory(&m, &s, "c", 2).unwrap(),
            reward: 0.0,
        };
        let mut moved = m.clone();
        let mut rng = rng_from_seed(1);
        moved
            .params_mut()
            .iter_mut()
            .for_each(|p| *p += normal::<f64, _>(&mut rng));
        let l = surrogate_loss(&moved, &s, &[ep], 0.2).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn one_step_kl_by_hand() {
        let (m, s) = tiny();
        let tr = sample_trajectory(&m, &s, "c", 3).unwrap();
        let kl = kl_regularizer(&m, &m, &s, std::slice::from_ref(&tr)).unwrap();
        assert_eq!(kl.value, 0.0);
        let mut other = m.clone();
        // shift the output bias of one pixel: ε̂ moves by ∂ε̂/∂F·δ, μ by coef times that
        let b_out_first = m.arch().output_bias_offset();
        other.params_mut()[b_out_first] += 0.1;
        let kl = kl_regularizer(&other, &m, &s, &[tr]).unwrap();
        let mut expected = 0.0;
        for t in 1..=2 {
            let ab = s.alpha_bar(t);
            let s2 = (1.0 - ab) / ab;
            let c_out = s2.sqrt() * 0.5 / (s2 + 0.25).sqrt();
            let d_eps = -ab.sqrt() * c_out / (1.0 - ab).sqrt() * 0.1;
            let d_mu = s.mean_eps_coef(t) * d_eps;
            expected += d_mu * d_mu / (2.0 * s.beta(t));
        }
        assert!((kl.value - expected).abs() < 1e-12, "{} vs {expected}", kl.value);
    }

    #[test]
    fn terms_lie_between_branches() {
        let (m, s) = tiny();
        let ep = Episode {
            trajectory: sample_trajectory(&m, &s, "c", 4).unwrap(),
            reward: -1.5,
        };
        let mut moved = m.clone();
        let mut rng = rng_from_seed(2);
        moved
            .params_mut()
            .iter_mut()
            .for_each(|p| *p += 0.05 * normal::<f64, _>(&mut rng));
        for st in surrogate_terms(&moved, &s, &ep, 0.01).unwrap() {
            assert!(st.term >= st.unclipped.min(st.clipped) && st.term <= st.unclipped.max(st.clipped));
        }
    }

    #[test]
    fn mismatched_schedule_is_rejected() {
        let (m, s) = tiny();
        let tr = sample_trajectory(&m, &s, "c", 5).unwrap();
        let s3 = make_schedule::<f64>(3, 0.05, 0.1).unwrap();
        assert!(kl_regularizer(&m, &m, &s3, &[tr]).is_err());
    }
}

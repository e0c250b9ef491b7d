//! Randomized invariants checked against independent oracles.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rlcp_core::ddpo::{kl_regularizer, surrogate_loss, Episode};
use rlcp_core::diffusion::{forward_sample, make_schedule, sample_trajectory, Denoiser, DenoiserArch};
use rlcp_core::encoders::{build_encoder, ConvEncoder, EncoderSpec};
use rlcp_core::eval::{fid_from_embeddings, spearman};
use rlcp_core::image::Image;
use rlcp_core::metric::{copyright_loss_features, ImageFeatures, MetricWeights};
use rlcp_core::rng::{normal_vec, rng_from_seed};

fn small_encoder() -> ConvEncoder<f64> {
    build_encoder(&EncoderSpec {
        layer_widths: vec![4, 8],
        embedding_dim: 8,
        input_shape: (8, 8, 3),
        ..Default::default()
    })
    .unwrap()
}

fn image(seed: u64) -> Image<f64> {
    let mut rng = rng_from_seed(seed);
    let v: Vec<f64> = normal_vec(&mut rng, 8 * 8 * 3);
    Image::from_vec((8, 8, 3), v.iter().map(|x| 0.5 + 0.2 * x).collect()).unwrap()
}

fn tiny_arch() -> DenoiserArch {
    DenoiserArch {
        image_shape: (2, 2, 3),
        hidden: 3,
        template_hidden: 2,
        time_dim: 2,
        prompt_dim: 4,
        prompt_seed: 0,
        steps: 4,
        sigma_data: 0.5,
    }
}

fn perturb(m: &Denoiser<f64>, scale: f64, seed: u64) -> Denoiser<f64> {
    let mut out = m.clone();
    let noise: Vec<f64> = normal_vec(&mut rng_from_seed(seed), out.param_count());
    for (p, n) in out.params_mut().iter_mut().zip(noise) {
        *p += scale * n;
    }
    out
}

/// Fréchet distance via the eigenvalues of the non-symmetric product Σ_a Σ_b.
fn fid_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let stats = |rows: &[Vec<f64>]| {
        let (n, d) = (rows.len(), rows[0].len());
        let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = m.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0) + DMatrix::identity(d, d) * 1e-6;
        (mean, cov)
    };
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let prod = &ca * &cb;
    let tr_sqrt: f64 = prod.complex_eigenvalues().iter().map(|l| l.re.max(0.0).sqrt()).sum();
    (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn combined_score_is_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>(), a in 0.0f64..2.0, b in 0.0f64..2.0) {
        prop_assume!(a + b > 1e-3);
        let enc = small_encoder();
        let w = MetricWeights::new(a, b).unwrap();
        let (x, y) = (ImageFeatures::of(&enc, &image(s1)).unwrap(), ImageFeatures::of(&enc, &image(s2)).unwrap());
        let xy = copyright_loss_features(&x, &y, &w).unwrap();
        let yx = copyright_loss_features(&y, &x, &w).unwrap();
        prop_assert!((xy - yx).abs() <= 1e-12);
        prop_assert!(xy <= a + b + 1e-12);
        prop_assert!((copyright_loss_features(&x, &x, &w).unwrap() - (a + b)).abs() <= 1e-12);
    }

    #[test]
    fn fid_matches_eigenvalue_oracle(seed in any::<u64>(), shift in -2.0f64..2.0) {
        let mut rng = rng_from_seed(seed);
        let a: Vec<Vec<f64>> = (0..12).map(|_| normal_vec(&mut rng, 4)).collect();
        let b: Vec<Vec<f64>> = (0..15)
            .map(|_| normal_vec::<f64, _>(&mut rng, 4).iter().enumerate().map(|(j, v)| v * (1.0 + 0.3 * j as f64) + shift).collect())
            .collect();
        let got = fid_from_embeddings(&a, &b).unwrap();
        let want = fid_oracle(&a, &b);
        prop_assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "got {got}, oracle {want}");
    }

    #[test]
    fn spearman_matches_rank_difference_formula(seed in any::<u64>(), n in 3usize..40) {
        let mut rng = rng_from_seed(seed);
        let x: Vec<f64> = normal_vec(&mut rng, n);
        let y: Vec<f64> = normal_vec(&mut rng, n);
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter().map(|a| v.iter().filter(|b| *b < a).count() as f64).collect()
        };
        let (rx, ry) = (rank(&x), rank(&y));
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        let nf = n as f64;
        let want = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        prop_assert!((spearman(&x, &y) - want).abs() <= 1e-12);
    }

    #[test]
    fn forward_sample_is_the_closed_form(seed in any::<u64>(), t in 1usize..=50) {
        let schedule = make_schedule::<f64>(50, 1e-4, 0.02).unwrap();
        let mut rng = rng_from_seed(seed);
        let x0: Vec<f64> = normal_vec(&mut rng, 16);
        let eps: Vec<f64> = normal_vec(&mut rng, 16);
        let ab: f64 = (1..=t).map(|s| 1.0 - (1e-4 + (0.02 - 1e-4) * (s - 1) as f64 / 49.0)).product();
        let xt = forward_sample(&schedule, &x0, t, &eps).unwrap();
        for i in 0..16 {
            prop_assert!((xt[i] - (ab.sqrt() * x0[i] + (1.0 - ab).sqrt() * eps[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_flat_at_the_reference(seed in any::<u64>(), scale in 1e-4f64..0.3) {
        let schedule = make_schedule::<f64>(4, 0.01, 0.1).unwrap();
        let reference = Denoiser::<f64>::new(tiny_arch(), seed).unwrap();
        let trajs: Vec<_> = (0..3)
            .map(|k| sample_trajectory(&reference, &schedule, &format!("prompt {k}"), seed ^ k).unwrap())
            .collect();
        let moved = perturb(&reference, scale, seed.wrapping_add(1));
        prop_assert!(kl_regularizer(&moved, &reference, &schedule, &trajs).unwrap().value >= 0.0);
        let at_ref = kl_regularizer(&reference, &reference, &schedule, &trajs).unwrap();
        prop_assert_eq!(at_ref.value, 0.0);
        prop_assert!(at_ref.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn surrogate_at_sampling_params_is_minus_mean_reward_times_steps(seed in any::<u64>(), r in -2.0f64..2.0) {
        let schedule = make_schedule::<f64>(4, 0.01, 0.1).unwrap();
        let model = Denoiser::<f64>::new(tiny_arch(), seed).unwrap();
        let episodes: Vec<Episode<f64>> = (0..3)
            .map(|k| Episode {
                trajectory: sample_trajectory(&model, &schedule, "a prompt", seed ^ (k + 7)).unwrap(),
                reward: r * (k + 1) as f64,
            })
            .collect();
        let got = surrogate_loss(&model, &schedule, &episodes, 0.2).unwrap().value;
        let want = -4.0 * r * (1.0 + 2.0 + 3.0) / 3.0;
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

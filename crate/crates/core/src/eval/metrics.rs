//! Percent-scaled evaluation metrics and FID over semantic embeddings.

use rayon::prelude::*;

use super::linalg::{frechet_distance, mean_and_covariance};
use crate::dataset::{normalize_prompt, ImageRecord};
use crate::encoders::ConvEncoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metric::{copyright_loss_features, ImageFeatures, MetricWeights};
use crate::rng::{derive_seed, fnv1a, normal_vec, rng_from_seed};
use crate::scalar::Scalar;

/// Stream index separating the text table from the encoder's own weights.
const TEXT_STREAM: u64 = 0x7465_7874;

/// `100 · mean_x max_a CL(x, a)`.
pub fn mean_cl<T: Scalar>(
    generated: &[Image<T>],
    anchors: &[ImageRecord<T>],
    encoder: &ConvEncoder<T>,
    w: &MetricWeights<T>,
) -> Result<T> {
    if generated.is_empty() || anchors.is_empty() {
        return Err(Error::invalid("mean_cl needs generated images and anchors"));
    }
    w.validate()?;
    let fa: Vec<ImageFeatures<T>> = anchors
        .par_iter()
        .map(|a| ImageFeatures::of(encoder, &a.pixels))
        .collect::<Result<_>>()?;
    let best: Vec<T> = generated
        .par_iter()
        .map(|g| {
            let fg = ImageFeatures::of(encoder, g)?;
            let mut m = T::neg_infinity();
            for a in &fa {
                m = m.max(copyright_loss_features(&fg, a, w)?);
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    Ok(T::lit(100.0) * best.iter().copied().sum::<T>() / T::lit(best.len() as f64))
}

/// Fixed text-side vector for `prompt`, paired with `encoder` through its seed.
pub fn text_embedding<T: Scalar>(encoder: &ConvEncoder<T>, prompt: &str) -> Vec<T> {
    let seed = derive_seed(
        derive_seed(encoder.spec().seed, TEXT_STREAM),
        fnv1a(&normalize_prompt(prompt)),
    );
    normal_vec(&mut rng_from_seed(seed), encoder.embedding_dim())
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        (dot / (na * nb)).max(-T::one()).min(T::one())
    }
}

/// `100 · mean (cos + 1)/2` over paired embeddings.
pub fn clip_score_embeddings<T: Scalar>(image_embs: &[Vec<T>], text_embs: &[Vec<T>]) -> Result<T> {
    if image_embs.len() != text_embs.len() {
        return Err(Error::Dimension {
            left: image_embs.len(),
            right: text_embs.len(),
        });
    }
    if image_embs.is_empty() {
        return Err(Error::invalid("clip_score needs at least one pair"));
    }
    let half = T::lit(0.5);
    let s: T = image_embs
        .iter()
        .zip(text_embs)
        .map(|(a, b)| (cosine(a, b) + T::one()) * half)
        .sum();
    Ok(T::lit(100.0) * s / T::lit(image_embs.len() as f64))
}

/// Image–prompt agreement in percent.
pub fn clip_score<T: Scalar>(generated: &[Image<T>], prompts: &[String], encoder: &ConvEncoder<T>) -> Result<T> {
    if generated.len() != prompts.len() {
        return Err(Error::Dimension {
            left: generated.len(),
            right: prompts.len(),
        });
    }
    let img: Vec<Vec<T>> = generated
        .par_iter()
        .map(|g| Ok(encoder.embed_semantic(g)?.vector))
        .collect::<Result<_>>()?;
    let txt: Vec<Vec<T>> = prompts.iter().map(|p| text_embedding(encoder, p)).collect();
    clip_score_embeddings(&img, &txt)
}

/// `100 · (1 − mean_x min_y MSE(x, y))`.
pub fn l2_metric<T: Scalar>(generated: &[Image<T>], train: &[ImageRecord<T>]) -> Result<T> {
    if generated.is_empty() || train.is_empty() {
        return Err(Error::invalid("l2_metric needs generated and training images"));
    }
    let mins: Vec<T> = generated
        .par_iter()
        .map(|g| {
            let mut m = T::infinity();
            for r in train {
                m = m.min(g.mse(&r.pixels)?);
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let mean = mins.iter().copied().sum::<T>() / T::lit(mins.len() as f64);
    Ok(T::lit(100.0) * (T::one() - mean))
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn fid_from_embeddings<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> Result<T> {
    let (mu_a, cov_a) = mean_and_covariance(a)?;
    let (mu_b, cov_b) = mean_and_covariance(b)?;
    frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b)
}

pub fn embed_all<T: Scalar>(images: &[&Image<T>], encoder: &ConvEncoder<T>) -> Result<Vec<Vec<T>>> {
    images
        .par_iter()
        .map(|g| Ok(encoder.embed_semantic(g)?.vector))
        .collect()
}

/// FID between two image sets under the semantic encoder.
pub fn fid<T: Scalar>(set_a: &[Image<T>], set_b: &[Image<T>], encoder: &ConvEncoder<T>) -> Result<T> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::invalid("fid needs two non-empty image sets"));
    }
    let ea = embed_all(&set_a.iter().collect::<Vec<_>>(), encoder)?;
    let eb = embed_all(&set_b.iter().collect::<Vec<_>>(), encoder)?;
    fid_from_embeddings(&ea, &eb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{build_encoder, EncoderSpec};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn enc() -> ConvEncoder<f64> {
        build_encoder(&EncoderSpec {
            input_shape: (8, 8, 3),
            ..EncoderSpec::default()
        })
        .unwrap()
    }

    fn img(seed: u64) -> Image<f64> {
        let mut rng = rng_from_seed(seed);
        Image::from_fn((8, 8, 3), |_, _, _| rng.random())
    }

    fn rec(i: &Image<f64>) -> ImageRecord<f64> {
        ImageRecord {
            id: "a".into(),
            pixels: i.clone(),
            prompt: "p".into(),
            copyrighted: true,
            source_path: Default::default(),
        }
    }

    #[test]
    fn mean_cl_examples() {
        let e = enc();
        let w = MetricWeights::default();
        let a = img(1);
        assert!((mean_cl(std::slice::from_ref(&a), &[rec(&a)], &e, &w).unwrap() - 100.0).abs() < 1e-9);
        let (b, c) = (img(2), img(3));
        let expect = 100.0
            * [&b, &c]
                .iter()
                .map(|y| crate::metric::copyright_loss(&rec(&a), &rec(y), &e, &w).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
        assert!((mean_cl(std::slice::from_ref(&a), &[rec(&b), rec(&c)], &e, &w).unwrap() - expect).abs() < 1e-9);
        assert!(mean_cl(&[a], &[], &e, &w).is_err());
    }

    #[test]
    fn clip_score_examples() {
        let v: Vec<f64> = vec![1.0, 2.0, -0.5];
        assert!(
            (clip_score_embeddings(std::slice::from_ref(&v), std::slice::from_ref(&v)).unwrap() - 100.0).abs() < 1e-12
        );
        let (x, y): (Vec<f64>, Vec<f64>) = (vec![1.0, 0.0], vec![0.0, 3.0]);
        assert!((clip_score_embeddings(std::slice::from_ref(&x), &[y]).unwrap() - 50.0).abs() < 1e-12);
        assert!(
            clip_score_embeddings(std::slice::from_ref(&x), &[vec![-2.0, 0.0]])
                .unwrap()
                .abs()
                < 1e-12
        );
        let e = enc();
        assert!(clip_score(&[img(1)], &[], &e).is_err());
        let s = clip_score(&[img(1), img(2)], &["a".into(), "b".into()], &e).unwrap();
        assert!((0.0..=100.0).contains(&s));
    }

    #[test]
    fn l2_examples() {
        let a = img(4);
        assert_eq!(
            l2_metric(std::slice::from_ref(&a), &[rec(&img(5)), rec(&a)]).unwrap(),
            100.0
        );
        let zeros = Image::zeros((8, 8, 3));
        let ones = Image::filled((8, 8, 3), 1.0);
        assert_eq!(l2_metric(&[zeros], &[rec(&ones)]).unwrap(), 0.0);
        let (g, t1, t2) = (img(6), img(7), img(8));
        let mut best = f64::INFINITY;
        for t in [&t1, &t2] {
            let mut s = 0.0;
            for k in 0..g.len() {
                s += (g.data()[k] - t.data()[k]).powi(2);
            }
            best = best.min(s / g.len() as f64);
        }
        let got = l2_metric(&[g], &[rec(&t1), rec(&t2)]).unwrap();
        assert!((got - 100.0 * (1.0 - best)).abs() < 1e-10);
        assert!(l2_metric(&[img(1)], &[rec(&Image::zeros((4, 4, 3)))]).is_err());
    }

    #[test]
    fn fid_identity_and_errors() {
        let e = enc();
        let set: Vec<_> = (0..12).map(img).collect();
        assert!(fid(&set, &set, &e).unwrap() <= 1e-6);
        assert!(fid(&set, &[], &e).is_err());
    }
}

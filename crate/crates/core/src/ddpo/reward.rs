//! Terminal reward of an episode.

use std::collections::HashMap;

use super::config::{AnchorPolicy, RewardConfig, RewardMode};
use crate::dataset::{anchors_for_prompt, normalize_prompt, CorpusManifest};
use crate::encoders::ConvEncoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metric::{combine, ImageFeatures, MetricWeights};
use crate::scalar::Scalar;

fn score<T: Scalar>(
    x: &ImageFeatures<T>,
    anchor: &ImageFeatures<T>,
    mode: RewardMode,
    w: &MetricWeights<T>,
) -> Result<T> {
    let d = x.distances(anchor)?;
    match mode {
        RewardMode::Distance => Ok(w.alpha * d.sem + w.beta * d.perc),
        RewardMode::NegCl => Ok(-combine(d, w)?),
    }
}

/// Reward of a generated image: the governing anchor is the most similar
/// one, so `distance` mode takes the minimum score and `neg_cl` the minimum
/// of the negated similarities.
pub fn reward<T: Scalar>(
    x0: &Image<T>,
    prompt: &str,
    manifest: &CorpusManifest<T>,
    encoder: &ConvEncoder<T>,
    cfg: &RewardConfig,
) -> Result<T> {
    cfg.validate()?;
    if !x0.is_finite() {
        return Err(Error::NonFinite("generated image".into()));
    }
    let anchors: Vec<_> = match cfg.anchor_policy {
        AnchorPolicy::MinOverPromptAnchors => anchors_for_prompt(manifest, prompt),
        AnchorPolicy::MinOverAllCopyright => manifest.copyrighted().collect(),
    };
    if anchors.is_empty() {
        return Ok(T::lit(cfg.fallback_reward));
    }
    let w = cfg.weights();
    let fx = ImageFeatures::of(encoder, x0)?;
    let mut best: Option<T> = None;
    for a in anchors {
        let s = score(&fx, &ImageFeatures::of(encoder, &a.pixels)?, cfg.mode, &w)?;
        best = Some(best.map_or(s, |b| b.min(s)));
    }
    Ok(best.expect("non-empty anchor set"))
}

/// [`reward`] with anchor features computed once up front.
pub struct RewardModel<'a, T> {
    encoder: &'a ConvEncoder<T>,
    cfg: RewardConfig,
    weights: MetricWeights<T>,
    anchors: Vec<ImageFeatures<T>>,
    by_prompt: HashMap<String, Vec<usize>>,
}

impl<'a, T: Scalar> RewardModel<'a, T> {
    pub fn new(manifest: &CorpusManifest<T>, encoder: &'a ConvEncoder<T>, cfg: &RewardConfig) -> Result<Self> {
        cfg.validate()?;
        let mut anchors = Vec::new();
        let mut by_prompt: HashMap<String, Vec<usize>> = HashMap::new();
        for r in manifest.copyrighted() {
            by_prompt
                .entry(normalize_prompt(&r.prompt))
                .or_default()
                .push(anchors.len());
            anchors.push(ImageFeatures::of(encoder, &r.pixels)?);
        }
        Ok(Self {
            encoder,
            cfg: *cfg,
            weights: cfg.weights(),
            anchors,
            by_prompt,
        })
    }

    pub fn config(&self) -> &RewardConfig {
        &self.cfg
    }

    pub fn reward(&self, x0: &Image<T>, prompt: &str) -> Result<T> {
        if !x0.is_finite() {
            return Err(Error::NonFinite("generated image".into()));
        }
        let idx: Vec<usize> = match self.cfg.anchor_policy {
            AnchorPolicy::MinOverPromptAnchors => self
                .by_prompt
                .get(&normalize_prompt(prompt))
                .cloned()
                .unwrap_or_default(),
            AnchorPolicy::MinOverAllCopyright => (0..self.anchors.len()).collect(),
        };
        if idx.is_empty() {
            return Ok(T::lit(self.cfg.fallback_reward));
        }
        let fx = ImageFeatures::of(self.encoder, x0)?;
        let mut best: Option<T> = None;
        for i in idx {
            let s = score(&fx, &self.anchors[i], self.cfg.mode, &self.weights)?;
            best = Some(best.map_or(s, |b| b.min(s)));
        }
        Ok(best.expect("non-empty anchor set"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageRecord;
    use crate::encoders::{build_encoder, EncoderSpec};
    use crate::metric::{d_perc, d_sem};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn rand_img(seed: u64) -> Image<f64> {
        let mut rng = rng_from_seed(seed);
        Image::from_fn((16, 16, 3), |_, _, _| rng.random())
    }

    fn corpus(images: &[(&str, Image<f64>, bool)]) -> CorpusManifest<f64> {
        let records = images
            .iter()
            .enumerate()
            .map(|(i, (p, img, c))| ImageRecord {
                id: format!("r{i}"),
                pixels: img.clone(),
                prompt: p.to_string(),
                copyrighted: *c,
                source_path: Default::default(),
            })
            .collect();
        CorpusManifest::from_records(records, (16, 16, 3), 0).unwrap()
    }

    fn enc() -> ConvEncoder<f64> {
        build_encoder(&EncoderSpec {
            input_shape: (16, 16, 3),
            ..EncoderSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn identical_anchor_examples() {
        let e = enc();
        let a = rand_img(1);
        let m = corpus(&[("star", a.clone(), true), ("other", rand_img(2), false)]);
        let cfg = RewardConfig::default();
        assert_eq!(reward(&a, "star", &m, &e, &cfg).unwrap(), 0.0);
        let neg = RewardConfig {
            mode: RewardMode::NegCl,
            ..cfg
        };
        assert!((reward(&a, "star", &m, &e, &neg).unwrap() + 1.0).abs() < 1e-12);
        let fb = RewardConfig {
            fallback_reward: 1.0,
            ..cfg
        };
        assert_eq!(reward(&a, "other", &m, &e, &fb).unwrap(), 1.0);
    }

    #[test]
    fn two_anchors_take_the_smaller_score() {
        let e = enc();
        let (a1, a2, x) = (rand_img(3), rand_img(4), rand_img(5));
        let m = corpus(&[("p", a1.clone(), true), ("p", a2.clone(), true)]);
        let cfg = RewardConfig {
            alpha: 0.3,
            beta: 0.7,
            ..RewardConfig::default()
        };
        let brute = [&a1, &a2]
            .iter()
            .map(|a| {
                let (sx, px) = e.features(&x).unwrap();
                let (sa, pa) = e.features(a).unwrap();
                0.3 * d_sem(&sx, &sa).unwrap() + 0.7 * d_perc(&px, &pa).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((reward(&x, "p", &m, &e, &cfg).unwrap() - brute).abs() < 1e-12);
        let cached = RewardModel::new(&m, &e, &cfg).unwrap();
        assert_eq!(cached.reward(&x, "p").unwrap(), reward(&x, "p", &m, &e, &cfg).unwrap());
    }

    #[test]
    fn all_copyright_policy_ignores_prompts() {
        let e = enc();
        let a = rand_img(6);
        let m = corpus(&[("p", a.clone(), true), ("q", rand_img(7), false)]);
        let cfg = RewardConfig {
            anchor_policy: AnchorPolicy::MinOverAllCopyright,
            fallback_reward: 9.0,
            ..RewardConfig::default()
        };
        assert_eq!(reward(&a, "q", &m, &e, &cfg).unwrap(), 0.0);
        let model = RewardModel::new(&m, &e, &cfg).unwrap();
        assert_eq!(model.reward(&a, "anything").unwrap(), 0.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let e = enc();
        let m = corpus(&[("p", rand_img(1), true)]);
        let mut x = rand_img(2);
        x.set(0, 0, 0, f64::NAN);
        assert!(reward(&x, "p", &m, &e, &RewardConfig::default()).is_err());
    }
}

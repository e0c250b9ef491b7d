//! Sampling a model over a corpus's prompt distribution and scoring it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{clip_score, embed_all, fid_from_embeddings, l2_metric, mean_cl};
use crate::dataset::{CorpusManifest, ImageRecord};
use crate::diffusion::{sample_trajectory, Denoiser, NoiseSchedule};
use crate::encoders::ConvEncoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metric::{cl_matrix, CLMatrix, MetricWeights};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

/// A generated image with the prompt that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub prompt: String,
    pub image: Image<T>,
}

/// Draws `n` prompts uniformly over the corpus records and samples one image
/// per prompt.
pub fn generate_samples<T: Scalar>(
    model: &Denoiser<T>,
    manifest: &CorpusManifest<T>,
    schedule: &NoiseSchedule<T>,
    n: usize,
    seed: u64,
) -> Result<Vec<Sample<T>>> {
    if manifest.is_empty() {
        return Err(Error::invalid("cannot draw prompts from an empty corpus"));
    }
    let mut rng = rng_from_seed(seed);
    let jobs: Vec<(String, u64)> = (0..n)
        .map(|_| {
            let r = &manifest.records[rng.random_range(0..manifest.len())];
            (r.prompt.clone(), rng.random::<u64>())
        })
        .collect();
    let shape = model.arch().image_shape;
    jobs.par_iter()
        .map(|(prompt, s)| {
            let tr = sample_trajectory(model, schedule, prompt, *s)?;
            Ok(Sample {
                prompt: prompt.clone(),
                image: tr.image(shape)?,
            })
        })
        .collect()
}

/// The four headline metrics plus the settings they were computed under.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub clip_score_pct: f64,
    pub cl_pct: f64,
    pub l2_pct: f64,
    pub fid: f64,
    pub n_generated: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub encoder_id: String,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "clip_score_pct,cl_pct,l2_pct,fid,n_generated,seed";

    pub fn is_finite(&self) -> bool {
        [self.clip_score_pct, self.cl_pct, self.l2_pct, self.fid]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.clip_score_pct, self.cl_pct, self.l2_pct, self.fid, self.n_generated, self.seed
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    /// `key=value` lines under a header stating the percentage conventions.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str("# clip_score_pct = 100 * mean((cos(image, text) + 1) / 2)\n");
        s.push_str("# cl_pct = 100 * mean over samples of max over copyrighted anchors of CL\n");
        s.push_str("# l2_pct = 100 * (1 - mean over samples of min MSE to a copyrighted image)\n");
        s.push_str("# fid = Frechet distance of semantic embeddings, samples vs full corpus\n");
        let _ = writeln!(s, "clip_score_pct={}", self.clip_score_pct);
        let _ = writeln!(s, "cl_pct={}", self.cl_pct);
        let _ = writeln!(s, "l2_pct={}", self.l2_pct);
        let _ = writeln!(s, "fid={}", self.fid);
        let _ = writeln!(s, "n_generated={}", self.n_generated);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "beta={}", self.beta);
        let _ = writeln!(s, "encoder_id={}", self.encoder_id);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("report line without `=`: {line}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("report is missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Validation(format!("report field `{k}` is not a number")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Validation(format!("report field `{k}` is not an integer")))
        };
        Ok(Self {
            clip_score_pct: num("clip_score_pct")?,
            cl_pct: num("cl_pct")?,
            l2_pct: num("l2_pct")?,
            fid: num("fid")?,
            n_generated: int("n_generated")? as usize,
            seed: int("seed")?,
            alpha: num("alpha")?,
            beta: num("beta")?,
            encoder_id: get("encoder_id")?,
        })
    }

    /// Writes `<stem>.txt` and `<stem>.csv`.
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let kv = stem.with_extension("txt");
        let csv = stem.with_extension("csv");
        fs::write(&kv, self.to_kv()).map_err(|e| Error::io(&kv, e))?;
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok((kv, csv))
    }
}

/// Scores samples already drawn from a model.
pub fn evaluate_samples<T: Scalar>(
    samples: &[Sample<T>],
    manifest: &CorpusManifest<T>,
    encoder: &ConvEncoder<T>,
    w: &MetricWeights<T>,
    seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation needs at least one generated image"));
    }
    let anchors: Vec<ImageRecord<T>> = manifest.copyrighted().cloned().collect();
    if anchors.is_empty() {
        return Err(Error::invalid("evaluation needs at least one copyrighted record"));
    }
    let images: Vec<Image<T>> = samples.iter().map(|s| s.image.clone()).collect();
    let prompts: Vec<String> = samples.iter().map(|s| s.prompt.clone()).collect();
    let gen_emb = embed_all(&images.iter().collect::<Vec<_>>(), encoder)?;
    let corpus_emb = embed_all(&manifest.records.iter().map(|r| &r.pixels).collect::<Vec<_>>(), encoder)?;
    let report = EvalReport {
        clip_score_pct: clip_score(&images, &prompts, encoder)?.as_f64(),
        cl_pct: mean_cl(&images, &anchors, encoder, w)?.as_f64(),
        l2_pct: l2_metric(&images, &anchors)?.as_f64(),
        fid: fid_from_embeddings(&gen_emb, &corpus_emb)?.as_f64(),
        n_generated: samples.len(),
        seed,
        alpha: w.alpha.as_f64(),
        beta: w.beta.as_f64(),
        encoder_id: encoder.id().to_string(),
    };
    if !report.is_finite() {
        return Err(Error::NonFinite("evaluation produced a non-finite metric".into()));
    }
    Ok(report)
}

/// Samples `n_generated` images and computes every metric: CL and l2
/// against the copyrighted records, FID against the whole corpus.
pub fn evaluate<T: Scalar>(
    model: &Denoiser<T>,
    manifest: &CorpusManifest<T>,
    encoder: &ConvEncoder<T>,
    schedule: &NoiseSchedule<T>,
    w: &MetricWeights<T>,
    n_generated: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_generated == 0 {
        return Err(Error::invalid("n_generated must be at least 1"));
    }
    let samples = generate_samples(model, manifest, schedule, n_generated, seed)?;
    evaluate_samples(&samples, manifest, encoder, w, seed)
}

/// Computes the score matrix and writes it as `<stem>.csv` plus a `<stem>.png`
/// rendering.
pub fn heatmap_report<T: Scalar>(
    queries: &[ImageRecord<T>],
    values: &[ImageRecord<T>],
    encoder: &ConvEncoder<T>,
    w: &MetricWeights<T>,
    stem: &Path,
) -> Result<(CLMatrix<T>, PathBuf, PathBuf)> {
    let m = cl_matrix(queries, values, encoder, w)?;
    let csv = stem.with_extension("csv");
    let png = stem.with_extension("png");
    m.write_csv(&csv)?;
    m.render(16).write_png(&png)?;
    Ok((m, csv, png))
}

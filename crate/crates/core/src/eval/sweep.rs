//! End-to-end legs (mix → pretrain → fine-tune → evaluate) and the
//! copyright-proportion sweep built from them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{evaluate, EvalReport};
use crate::dataset::{mix_corpus, CorpusManifest};
use crate::ddpo::{finetune, FinetuneOutcome, RewardConfig, TrainConfig};
use crate::diffusion::{pretrain, Denoiser, DenoiserArch, LossCurve, NoiseSchedule, PretrainConfig, ScheduleParams};
use crate::encoders::ConvEncoder;
use crate::error::{Error, Result};
use crate::metric::MetricWeights;
use crate::plot::{dual_axis_plot, save_rgb};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

/// Everything a leg needs besides the source pools, encoder, `p_c` and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Size of each mixed corpus.
    pub corpus_size: usize,
    pub arch: DenoiserArch,
    pub schedule: ScheduleParams,
    pub pretrain: PretrainConfig,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    /// Weights of the evaluation score.
    pub eval_alpha: f64,
    pub eval_beta: f64,
    pub clamp_cl_perc_nonnegative: bool,
    pub n_generated: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus_size: 200,
            arch: DenoiserArch::default(),
            schedule: ScheduleParams::default(),
            pretrain: PretrainConfig::default(),
            reward: RewardConfig::default(),
            train: TrainConfig::default(),
            eval_alpha: 0.5,
            eval_beta: 0.5,
            clamp_cl_perc_nonnegative: false,
            n_generated: 64,
        }
    }
}

/// Per-stage seeds derived from one leg seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LegSeeds {
    pub mix: u64,
    pub init: u64,
    pub pretrain: u64,
    pub finetune: u64,
    pub eval: u64,
}

impl LegSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            mix: derive_seed(seed, 0),
            init: derive_seed(seed, 1),
            pretrain: derive_seed(seed, 2),
            finetune: derive_seed(seed, 3),
            eval: derive_seed(seed, 4),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LegResult<T> {
    pub p_c: f64,
    pub seed: u64,
    pub corpus: CorpusManifest<T>,
    pub pretrained: Denoiser<T>,
    pub loss_curve: LossCurve,
    pub finetuned: FinetuneOutcome<T>,
    /// Evaluations of the pretrained and fine-tuned models with the same seed.
    pub before: EvalReport,
    pub after: EvalReport,
}

impl PipelineConfig {
    pub fn weights<T: Scalar>(&self) -> MetricWeights<T> {
        MetricWeights {
            alpha: T::lit(self.eval_alpha),
            beta: T::lit(self.eval_beta),
            clamp_cl_perc_nonnegative: self.clamp_cl_perc_nonnegative,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus_size == 0 || self.n_generated == 0 {
            return Err(Error::invalid("corpus_size and n_generated must be positive"));
        }
        if self.arch.steps != self.schedule.steps {
            return Err(Error::Incompatible(format!(
                "architecture built for {} steps, schedule has {}",
                self.arch.steps, self.schedule.steps
            )));
        }
        self.arch.validate()?;
        self.pretrain.validate()?;
        self.reward.validate()?;
        self.train.validate()?;
        self.weights::<f64>().validate()
    }

    /// Runs one leg from the source pools.
    pub fn run_leg<T: Scalar>(
        &self,
        copyright_pool: &CorpusManifest<T>,
        noncopyright_pool: &CorpusManifest<T>,
        encoder: &ConvEncoder<T>,
        p_c: f64,
        seed: u64,
    ) -> Result<LegResult<T>> {
        self.validate()?;
        let seeds = LegSeeds::from_seed(seed);
        let corpus = mix_corpus(copyright_pool, noncopyright_pool, p_c, self.corpus_size, seeds.mix)?;
        self.run_on_corpus(corpus, encoder, p_c, seed)
    }

    /// Runs one leg on an already assembled corpus.
    pub fn run_on_corpus<T: Scalar>(
        &self,
        corpus: CorpusManifest<T>,
        encoder: &ConvEncoder<T>,
        p_c: f64,
        seed: u64,
    ) -> Result<LegResult<T>> {
        self.validate()?;
        let seeds = LegSeeds::from_seed(seed);
        let schedule = NoiseSchedule::<T>::from_params(&self.schedule)?;
        let mut model = Denoiser::new(self.arch.clone(), seeds.init)?;
        let pcfg = PretrainConfig {
            seed: seeds.pretrain,
            ..self.pretrain.clone()
        };
        let loss_curve = pretrain(&mut model, &corpus, &schedule, &pcfg)?;
        let tcfg = TrainConfig {
            seed: seeds.finetune,
            ..self.train.clone()
        };
        let finetuned = finetune(&model, &corpus, encoder, &schedule, &self.reward, &tcfg)?;
        let w = self.weights();
        let before = evaluate(&model, &corpus, encoder, &schedule, &w, self.n_generated, seeds.eval)?;
        let after = evaluate(
            &finetuned.model,
            &corpus,
            encoder,
            &schedule,
            &w,
            self.n_generated,
            seeds.eval,
        )?;
        Ok(LegResult {
            p_c,
            seed,
            corpus,
            pretrained: model,
            loss_curve,
            finetuned,
            before,
            after,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub p_c: f64,
    pub cl_pct: f64,
    pub fid: f64,
    pub seed: u64,
}

/// Rows grouped by `p_c` (increasing), seeds in the order given.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub seeds: Vec<u64>,
}

impl SweepReport {
    pub const HEADER: &'static str = "p_c,cl_pct,fid,seed";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.p_c, r.cl_pct, r.fid, r.seed);
        }
        s
    }

    /// Distinct `p_c` values with the seed-averaged CL and FID.
    pub fn means(&self) -> Vec<(f64, f64, f64)> {
        let mut out: Vec<(f64, f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(last) if last.0 == r.p_c => {
                    last.1 += r.cl_pct;
                    last.2 += r.fid;
                    last.3 += 1;
                }
                _ => out.push((r.p_c, r.cl_pct, r.fid, 1)),
            }
        }
        out.into_iter()
            .map(|(p, c, f, n)| (p, c / n as f64, f / n as f64))
            .collect()
    }

    /// Spearman correlation between `p_c` and CL over all rows.
    pub fn spearman_cl(&self) -> f64 {
        let p: Vec<f64> = self.rows.iter().map(|r| r.p_c).collect();
        let c: Vec<f64> = self.rows.iter().map(|r| r.cl_pct).collect();
        spearman(&p, &c)
    }

    /// Writes `<stem>.csv` and a dual-axis `<stem>.png` (CL left, FID right).
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv = stem.with_extension("csv");
        let png = stem.with_extension("png");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let m = self.means();
        let xs: Vec<f64> = m.iter().map(|r| r.0).collect();
        let cl: Vec<f64> = m.iter().map(|r| r.1).collect();
        let fid: Vec<f64> = m.iter().map(|r| r.2).collect();
        save_rgb(&dual_axis_plot(&xs, &cl, &fid, 480, 320), &png)?;
        Ok((csv, png))
    }
}

/// Runs every `(p_c, seed)` leg, in parallel, and collects the post-fine-tuning
/// evaluations.
pub fn proportion_sweep<T: Scalar>(
    p_values: &[f64],
    seeds: &[u64],
    cfg: &PipelineConfig,
    copyright_pool: &CorpusManifest<T>,
    noncopyright_pool: &CorpusManifest<T>,
    encoder: &ConvEncoder<T>,
) -> Result<(SweepReport, Vec<LegResult<T>>)> {
    if p_values.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one proportion and one seed"));
    }
    if p_values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("sweep proportions must be strictly increasing"));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("sweep proportion {p} outside [0, 1]")));
    }
    cfg.validate()?;
    let legs: Vec<(f64, u64)> = p_values
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results: Vec<LegResult<T>> = legs
        .par_iter()
        .map(|&(p, s)| cfg.run_leg(copyright_pool, noncopyright_pool, encoder, p, s))
        .collect::<Result<_>>()?;
    let rows = results
        .iter()
        .map(|r| SweepRow {
            p_c: r.p_c,
            cl_pct: r.after.cl_pct,
            fid: r.after.fid,
            seed: r.seed,
        })
        .collect();
    Ok((
        SweepReport {
            rows,
            seeds: seeds.to_vec(),
        },
        results,
    ))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Rank correlation with average ranks for ties; NaN when either side is
/// constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

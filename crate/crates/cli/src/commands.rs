//! The subcommands. Each validates everything it can before starting work,
//! writes only under `output_dir`, echoes written paths to stdout and ends
//! with a `run_manifest_<command>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rlcp_core::dataset::toy::{self, ToyCorpusSpec};
use rlcp_core::dataset::{load_corpus, mix_corpus, ImageRecord};
use rlcp_core::ddpo::finetune;
use rlcp_core::diffusion::{pretrain, sample_trajectory, Checkpoint, PretrainConfig};
use rlcp_core::encoders::build_encoder;
use rlcp_core::eval::{evaluate, heatmap_report, proportion_sweep, LegSeeds};
use rlcp_core::rng::derive_seed;
use rlcp_core::{Corpus, ImageEncoder, Model, Schedule};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{io_err, CliError};

/// Bookkeeping for one invocation: artifacts, stage timings, manifest.
struct Run<'a> {
    command: &'static str,
    cfg: &'a RunConfig,
    artifacts: Vec<PathBuf>,
    timings: BTreeMap<String, f64>,
    started: Instant,
}

impl<'a> Run<'a> {
    fn start(command: &'static str, cfg: &'a RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
        Ok(Self {
            command,
            cfg,
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn wrote(&mut self, path: PathBuf) {
        println!("{}", path.display());
        self.artifacts.push(path);
    }

    fn timed<R>(&mut self, stage: &str, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let r = f();
        self.timings.insert(stage.to_string(), t.elapsed().as_secs_f64());
        r
    }

    fn finish(mut self) -> Result<(), CliError> {
        let path = self.path(&format!("run_manifest_{}.json", self.command));
        let artifacts: Vec<String> = self
            .artifacts
            .iter()
            .map(|p| p.strip_prefix(&self.cfg.output_dir).unwrap_or(p).display().to_string())
            .collect();
        let manifest = json!({
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "config": self.cfg,
            "artifacts": artifacts,
            "timings_seconds": self.timings,
            "total_seconds": self.started.elapsed().as_secs_f64(),
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        self.wrote(path);
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn pools(cfg: &RunConfig) -> Result<(Corpus, Corpus), CliError> {
    let root = &cfg.dataset.root;
    let c = load_corpus(root, &cfg.dataset.copyright_manifest)?;
    let nc = load_corpus(root, &cfg.dataset.noncopyright_manifest)?;
    for (key, set) in [("copyright", &c), ("noncopyright", &nc)] {
        if set.image_shape != cfg.model.image_shape {
            return Err(CliError::Config(format!(
                "dataset: {key} images are {:?} but model.image_shape is {:?}",
                set.image_shape, cfg.model.image_shape
            )));
        }
    }
    Ok((c, nc))
}

fn mixed_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    let (c, nc) = pools(cfg)?;
    let seeds = LegSeeds::from_seed(cfg.seed);
    Ok(mix_corpus(
        &c,
        &nc,
        cfg.dataset.p_c,
        cfg.dataset.corpus_size,
        seeds.mix,
    )?)
}

fn encoder(cfg: &RunConfig) -> Result<ImageEncoder, CliError> {
    build_encoder(&cfg.encoder_spec()).map_err(|e| CliError::Config(format!("encoder: {e}")))
}

fn schedule(cfg: &RunConfig) -> Result<Schedule, CliError> {
    Schedule::from_params(&cfg.schedule).map_err(|e| CliError::Config(format!("schedule: {e}")))
}

/// Loads a checkpoint and checks it against the configured schedule and
/// architecture.
fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Model, CliError> {
    if !path.is_file() {
        return Err(CliError::Io(format!("checkpoint `{}` does not exist", path.display())));
    }
    let ck = Checkpoint::<f64>::load(path)?;
    ck.check_compatible(&cfg.schedule, &cfg.model)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(ck.model)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.check_dataset()?;
    let corpus = mixed_corpus(cfg)?;
    let schedule = schedule(cfg)?;
    let seeds = LegSeeds::from_seed(cfg.seed);
    let mut run = Run::start("pretrain", cfg)?;
    let mut model = Model::new(cfg.model.clone(), seeds.init)?;
    let pcfg = PretrainConfig {
        seed: seeds.pretrain,
        ..cfg.pretrain.clone()
    };
    let curve = run.timed("pretrain", || pretrain(&mut model, &corpus, &schedule, &pcfg))?;
    if !model.is_finite() {
        return Err(CliError::Runtime("pretraining produced non-finite parameters".into()));
    }

    let corpus_path = run.path("corpus.tsv");
    corpus.write_manifest(&corpus_path)?;
    run.wrote(corpus_path);
    let loss_path = run.path("pretrain_loss.csv");
    write_text(&loss_path, &curve.to_csv())?;
    run.wrote(loss_path);
    let ckpt_path = run.path("pretrained.ckpt");
    Checkpoint::new(model, &schedule)
        .with_provenance(json!({"stage": "pretrain", "seed": cfg.seed, "p_c": cfg.dataset.p_c, "pretrain": pcfg}))
        .save(&ckpt_path)?;
    run.wrote(ckpt_path);
    eprintln!("final pretraining loss {:.6}", curve.last().unwrap_or(f64::NAN));
    run.finish()
}

pub fn cmd_finetune(cfg: &RunConfig, pretrained: &Path) -> Result<(), CliError> {
    let model = load_checkpoint(cfg, pretrained)?;
    cfg.check_dataset()?;
    let corpus = mixed_corpus(cfg)?;
    let enc = encoder(cfg)?;
    let schedule = schedule(cfg)?;
    let seeds = LegSeeds::from_seed(cfg.seed);
    let mut run = Run::start("finetune", cfg)?;
    let tcfg = rlcp_core::ddpo::TrainConfig {
        seed: seeds.finetune,
        ..cfg.train.clone()
    };
    let outcome = run.timed("finetune", || {
        finetune(&model, &corpus, &enc, &schedule, &cfg.reward, &tcfg)
    })?;

    let log_path = run.path("train_log.csv");
    write_text(&log_path, &outcome.log.to_csv_deterministic())?;
    run.wrote(log_path);
    if let Some(abort) = &outcome.abort {
        let path = run.path("abort.json");
        let text = serde_json::to_string_pretty(abort).expect("diagnostic serializes");
        write_text(&path, &(text + "\n"))?;
        run.wrote(path);
        run.finish()?;
        return Err(CliError::Runtime(format!(
            "fine-tuning aborted at iteration {} update {}: {}",
            abort.iteration, abort.update, abort.message
        )));
    }
    let ckpt_path = run.path("finetuned.ckpt");
    Checkpoint::new(outcome.model, &schedule)
        .with_provenance(json!({
            "stage": "finetune",
            "seed": cfg.seed,
            "pretrained": pretrained.display().to_string(),
            "train": tcfg,
            "reward": cfg.reward,
        }))
        .save(&ckpt_path)?;
    run.wrote(ckpt_path);
    if let Some(last) = outcome.log.records.last() {
        eprintln!(
            "iteration {}: mean reward {:.6}, mean KL {:.6}",
            last.iteration, last.mean_reward, last.mean_kl
        );
    }
    run.finish()
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let model = load_checkpoint(cfg, checkpoint)?;
    cfg.check_dataset()?;
    let corpus = mixed_corpus(cfg)?;
    let enc = encoder(cfg)?;
    let schedule = schedule(cfg)?;
    let seeds = LegSeeds::from_seed(cfg.seed);
    let mut run = Run::start("eval", cfg)?;
    let report = run.timed("evaluate", || {
        evaluate(
            &model,
            &corpus,
            &enc,
            &schedule,
            &cfg.weights(),
            cfg.eval.n_generated,
            seeds.eval,
        )
    })?;
    if !report.is_finite() {
        return Err(CliError::Runtime("evaluation produced non-finite metrics".into()));
    }
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let (kv, csv) = report.write(&run.path(&format!("eval_{stem}")))?;
    run.wrote(kv);
    run.wrote(csv);
    eprintln!(
        "CLIP {:.3}%  CL {:.3}%  l2 {:.3}%  FID {:.4}",
        report.clip_score_pct, report.cl_pct, report.l2_pct, report.fid
    );
    run.finish()
}

/// The first record of each of the first `n` distinct prompts.
fn heatmap_values(pool: &Corpus, n: usize) -> Result<Vec<ImageRecord<f64>>, CliError> {
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for r in &pool.records {
        let p = rlcp_core::dataset::normalize_prompt(&r.prompt);
        if !seen.contains(&p) {
            seen.push(p);
            out.push(r.clone());
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(CliError::Config(format!(
        "heatmap.n = {n} but the copyright set has only {} distinct prompts",
        out.len()
    )))
}

pub fn cmd_heatmap(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let model = checkpoint.map(|p| load_checkpoint(cfg, p)).transpose()?;
    cfg.check_dataset()?;
    let (pool, _) = pools(cfg)?;
    let values = heatmap_values(&pool, cfg.heatmap.n)?;
    let enc = encoder(cfg)?;
    let schedule = schedule(cfg)?;
    let seeds = LegSeeds::from_seed(cfg.seed);
    let mut run = Run::start("heatmap", cfg)?;
    let queries = match &model {
        None => values.clone(),
        Some(m) => run.timed("sample", || {
            values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let tr = sample_trajectory(m, &schedule, &v.prompt, derive_seed(seeds.eval, i as u64))?;
                    Ok(ImageRecord {
                        id: format!("gen_{}", v.id),
                        pixels: tr.image(m.arch().image_shape)?,
                        source_path: PathBuf::new(),
                        ..v.clone()
                    })
                })
                .collect::<rlcp_core::Result<Vec<_>>>()
        })?,
    };
    let (_, csv, png) = run.timed("score", || {
        heatmap_report(&queries, &values, &enc, &cfg.weights(), &run_path(cfg, "heatmap"))
    })?;
    run.wrote(csv);
    run.wrote(png);
    run.finish()
}

fn run_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.check_dataset()?;
    let (c, nc) = pools(cfg)?;
    let enc = encoder(cfg)?;
    let pipeline = cfg.pipeline();
    pipeline.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let mut run = Run::start("sweep", cfg)?;
    let (report, legs) = run.timed("sweep", || {
        proportion_sweep(&cfg.sweep.p_values, &cfg.sweep.seeds, &pipeline, &c, &nc, &enc)
    })?;
    if let Some(leg) = legs.iter().find(|l| l.finetuned.abort.is_some()) {
        eprintln!(
            "warning: leg p_c={} seed={} aborted fine-tuning: {}",
            leg.p_c,
            leg.seed,
            leg.finetuned
                .abort
                .as_ref()
                .map(|a| a.message.as_str())
                .unwrap_or_default()
        );
    }
    let (csv, png) = report.write(&run.path("sweep"))?;
    run.wrote(csv);
    run.wrote(png);
    if report.rows.len() > 1 {
        eprintln!("Spearman(p_c, CL) = {:.4}", report.spearman_cl());
    }
    run.finish()
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub size: usize,
    pub n_artworks: usize,
    pub n_photo_classes: usize,
    pub n_copyright: usize,
    pub n_noncopyright: usize,
    pub jitter: f64,
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.size < 2 {
        return Err(CliError::Config("--size must be at least 2".into()));
    }
    if !(a.jitter >= 0.0 && a.jitter.is_finite()) {
        return Err(CliError::Config("--jitter must be a finite value >= 0".into()));
    }
    let spec = ToyCorpusSpec {
        shape: (a.size, a.size, 3),
        n_artworks: a.n_artworks,
        n_photo_classes: a.n_photo_classes,
        n_copyright: a.n_copyright,
        n_noncopyright: a.n_noncopyright,
        copy_jitter: a.jitter,
        seed: a.seed,
    };
    let corpus = toy::generate::<f64>(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let (c, nc) = toy::save(&corpus, &a.out)?;
    println!("{}", c.display());
    println!("{}", nc.display());
    Ok(())
}

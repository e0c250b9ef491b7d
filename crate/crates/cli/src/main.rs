//! `rlcp`: pretrain, fine-tune, evaluate, heatmap and sweep from one TOML
//! config. Any key can be overridden with `--section.key value`.
//!
//! Exit codes: 0 success, 2 config/validation error, 3 runtime/numerical
//! error, 4 I/O error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::SynthArgs;
use config::{split_overrides, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "rlcp",
    version,
    about = "Copyright-aware fine-tuning of a toy diffusion model",
    after_help = "Every config key can be overridden as `--section.key value` (for example \
                  `--train.iterations 10`); `--lambda` is short for `--train.lambda`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Global seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a denoiser on the mixed corpus.
    Pretrain(Common),
    /// Fine-tune a pretrained checkpoint with the copyright reward.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pretrained: PathBuf,
    },
    /// Evaluate a checkpoint (CLIP, CL, l2, FID).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// CL matrix over distinct copyright prompts; rows are samples from
    /// `--checkpoint` when given, otherwise the originals themselves.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretrain, fine-tune and evaluate at every (p_c, seed) of the sweep.
    Sweep(Common),
    /// Write the synthetic toy corpus (PNGs plus two manifests).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        n_artworks: usize,
        #[arg(long, default_value_t = 10)]
        n_photo_classes: usize,
        #[arg(long, default_value_t = 200)]
        n_copyright: usize,
        #[arg(long, default_value_t = 200)]
        n_noncopyright: usize,
        #[arg(long, default_value_t = 0.02)]
        jitter: f64,
    },
}

fn resolve(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.output_dir {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match &cli.command {
        Command::Pretrain(c) => commands::cmd_pretrain(&resolve(c, &overrides)?),
        Command::Finetune { common, pretrained } => commands::cmd_finetune(&resolve(common, &overrides)?, pretrained),
        Command::Eval { common, checkpoint } => commands::cmd_eval(&resolve(common, &overrides)?, checkpoint),
        Command::Heatmap { common, checkpoint } => {
            commands::cmd_heatmap(&resolve(common, &overrides)?, checkpoint.as_deref())
        }
        Command::Sweep(c) => commands::cmd_sweep(&resolve(c, &overrides)?),
        Command::Synth {
            out,
            seed,
            size,
            n_artworks,
            n_photo_classes,
            n_copyright,
            n_noncopyright,
            jitter,
        } => {
            if !overrides.is_empty() {
                return Err(CliError::Config("synth takes no config overrides".into()));
            }
            commands::cmd_synth(&SynthArgs {
                out: out.clone(),
                seed: *seed,
                size: *size,
                n_artworks: *n_artworks,
                n_photo_classes: *n_photo_classes,
                n_copyright: *n_copyright,
                n_noncopyright: *n_noncopyright,
                jitter: *jitter,
            })
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

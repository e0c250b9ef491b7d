//! The TOML run configuration, `--section.key value` overrides and
//! up-front validation.

use std::path::{Path, PathBuf};

use rlcp_core::ddpo::{RewardConfig, TrainConfig};
use rlcp_core::diffusion::{DenoiserArch, PretrainConfig, ScheduleParams};
use rlcp_core::encoders::{EncoderSpec, WeightScheme};
use rlcp_core::eval::PipelineConfig;
use rlcp_core::metric::MetricWeights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Fans out to the mix, init, pretrain, fine-tune and eval seeds.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    pub schedule: ScheduleParams,
    pub model: DenoiserArch,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub eval: EvalSection,
    pub heatmap: HeatmapSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            encoder: EncoderSection::default(),
            schedule: ScheduleParams::default(),
            model: DenoiserArch::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
            eval: EvalSection::default(),
            heatmap: HeatmapSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Two source pools under one root, mixed per run at `p_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub root: PathBuf,
    pub copyright_manifest: PathBuf,
    pub noncopyright_manifest: PathBuf,
    pub p_c: f64,
    pub corpus_size: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: PathBuf::new(),
            copyright_manifest: PathBuf::from("copyright.tsv"),
            noncopyright_manifest: PathBuf::from("noncopyright.tsv"),
            p_c: 0.3,
            corpus_size: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub seed: u64,
    pub layer_widths: Vec<usize>,
    pub embedding_dim: usize,
    /// Per-channel perceptual weights file; uniform weights when absent.
    pub perceptual_weights: Option<PathBuf>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let spec = EncoderSpec::default();
        Self {
            seed: spec.seed,
            layer_widths: spec.layer_widths,
            embedding_dim: spec.embedding_dim,
            perceptual_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub alpha: f64,
    pub beta: f64,
    pub clamp_cl_perc_nonnegative: bool,
    pub n_generated: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            clamp_cl_perc_nonnegative: false,
            n_generated: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapSection {
    /// Number of distinct copyright prompts (rows and columns).
    pub n: usize,
    /// Pixel size of one rendered cell.
    pub cell: usize,
}

impl Default for HeatmapSection {
    fn default() -> Self {
        Self { n: 10, cell: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub p_values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            p_values: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            seeds: vec![0, 1, 2],
        }
    }
}

/// `(dotted key, raw value)` pairs in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Splits `argv` into ordinary arguments and `(key, raw value)` overrides.
/// An override is any `--a.b` flag (value in the next token or after `=`);
/// `--lambda` is shorthand for `--train.lambda`.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let key = match name.as_str() {
            "lambda" => "train.lambda".to_string(),
            n if n.contains('.') => n.to_string(),
            _ => {
                rest.push(arg);
                continue;
            }
        };
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Config(format!("override --{name} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// A raw override value as TOML: numbers, booleans and arrays parse as such,
/// anything else is taken as a string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key `{key}`")));
    }
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for s in sections {
        let entry = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{s}` is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies overrides in order and
    /// validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every module-level check that does not need to touch the dataset.
    pub fn validate(&self) -> Result<(), CliError> {
        let section = |name: &str, r: rlcp_core::Result<()>| r.map_err(|e| CliError::Config(format!("{name}: {e}")));
        section("model", self.model.validate())?;
        section("schedule", rlcp_core::Schedule::from_params(&self.schedule).map(|_| ()))?;
        if self.schedule.steps != self.model.steps {
            return Err(CliError::Config(format!(
                "model.steps ({}) must equal schedule.steps ({})",
                self.model.steps, self.schedule.steps
            )));
        }
        section("pretrain", self.pretrain.validate())?;
        section("train", self.train.validate())?;
        section("reward", self.reward.validate())?;
        section("eval", self.weights().validate())?;
        if self.eval.n_generated < 2 {
            return Err(CliError::Config("eval.n_generated must be at least 2".into()));
        }
        if self.encoder.layer_widths.is_empty() || self.encoder.layer_widths.contains(&0) {
            return Err(CliError::Config(
                "encoder.layer_widths must be non-empty and positive".into(),
            ));
        }
        if self.encoder.embedding_dim == 0 {
            return Err(CliError::Config("encoder.embedding_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.p_c) {
            return Err(CliError::Config(format!(
                "dataset.p_c = {} outside [0, 1]",
                self.dataset.p_c
            )));
        }
        if self.dataset.corpus_size == 0 {
            return Err(CliError::Config("dataset.corpus_size must be positive".into()));
        }
        if self.heatmap.n == 0 || self.heatmap.cell == 0 {
            return Err(CliError::Config("heatmap.n and heatmap.cell must be positive".into()));
        }
        if self.sweep.p_values.is_empty() || self.sweep.seeds.is_empty() {
            return Err(CliError::Config(
                "sweep.p_values and sweep.seeds must be non-empty".into(),
            ));
        }
        if self.sweep.p_values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CliError::Config("sweep.p_values must be strictly increasing".into()));
        }
        if let Some(p) = self.sweep.p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(CliError::Config(format!("sweep.p_values: {p} outside [0, 1]")));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config("output_dir must be set".into()));
        }
        Ok(())
    }

    /// Checks that the dataset files exist, before any work starts.
    pub fn check_dataset(&self) -> Result<(), CliError> {
        let root = &self.dataset.root;
        if root.as_os_str().is_empty() {
            return Err(CliError::Config("dataset.root is not set".into()));
        }
        if !root.is_dir() {
            return Err(CliError::Config(format!(
                "dataset.root: directory `{}` does not exist",
                root.display()
            )));
        }
        for (key, file) in [
            ("dataset.copyright_manifest", &self.dataset.copyright_manifest),
            ("dataset.noncopyright_manifest", &self.dataset.noncopyright_manifest),
        ] {
            let path = root.join(file);
            if !path.is_file() {
                return Err(CliError::Config(format!("{key}: `{}` does not exist", path.display())));
            }
        }
        if let Some(w) = &self.encoder.perceptual_weights {
            if !w.is_file() {
                return Err(CliError::Config(format!(
                    "encoder.perceptual_weights: `{}` does not exist",
                    w.display()
                )));
            }
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            seed: self.encoder.seed,
            layer_widths: self.encoder.layer_widths.clone(),
            embedding_dim: self.encoder.embedding_dim,
            weight_scheme: match &self.encoder.perceptual_weights {
                Some(p) => WeightScheme::Custom(p.clone()),
                None => WeightScheme::Uniform,
            },
            input_shape: self.model.image_shape,
        }
    }

    pub fn weights(&self) -> MetricWeights<f64> {
        MetricWeights {
            alpha: self.eval.alpha,
            beta: self.eval.beta,
            clamp_cl_perc_nonnegative: self.eval.clamp_cl_perc_nonnegative,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            corpus_size: self.dataset.corpus_size,
            arch: self.model.clone(),
            schedule: self.schedule,
            pretrain: self.pretrain.clone(),
            reward: self.reward,
            train: self.train.clone(),
            eval_alpha: self.eval.alpha,
            eval_beta: self.eval.beta,
            clamp_cl_perc_nonnegative: self.eval.clamp_cl_perc_nonnegative,
            n_generated: self.eval.n_generated,
        }
    }

    /// SHA-256 of the resolved configuration's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

//! Runs the `rlcp` binary end to end on a tiny synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rlcp_core::diffusion::Checkpoint;
use rlcp_core::eval::{evaluate, EvalReport, LegSeeds};
use rlcp_core::{dataset, encoders, Schedule};
use tempfile::TempDir;

const TINY: &str = r#"
seed = 3

[dataset]
p_c = 0.5
corpus_size = 12

[encoder]
layer_widths = [4, 8]
embedding_dim = 8

[schedule]
steps = 6
beta_start = 0.01
beta_end = 0.1

[model]
image_shape = [8, 8, 3]
hidden = 4
template_hidden = 3
time_dim = 4
prompt_dim = 8
steps = 6

[pretrain]
epochs = 2
batch_size = 4
draws_per_image = 2

[train]
iterations = 2
samples_per_iteration = 4
batch_size = 2
grad_updates_per_iteration = 1

[eval]
n_generated = 6

[heatmap]
n = 4
cell = 4

[sweep]
seeds = [0]
"#;

struct Fixture {
    dir: TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let out = rlcp(&[
            "synth",
            "--out",
            data.to_str().unwrap(),
            "--size",
            "8",
            "--n-artworks",
            "4",
            "--n-photo-classes",
            "4",
            "--n-copyright",
            "12",
            "--n-noncopyright",
            "12",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let config = dir.path().join("run.toml");
        let body = TINY.replace("[dataset]", &format!("[dataset]\nroot = {:?}", data.to_str().unwrap()));
        fs::write(&config, body).unwrap();
        Self { dir, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs a subcommand with this fixture's config and an output directory.
    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let out_dir = self.out(out);
        let mut args = vec![
            cmd,
            "--config",
            self.config.to_str().unwrap(),
            "--output-dir",
            out_dir.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        rlcp(&args)
    }
}

fn rlcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlcp")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pretrain_writes_artifacts_and_is_deterministic() {
    let f = Fixture::new();
    let a = f.run("pretrain", "a", &[]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = f.run("pretrain", "b", &[]);
    assert!(b.status.success(), "{}", stderr(&b));
    let ckpt = f.out("a/pretrained.ckpt");
    assert!(ckpt.is_file());
    assert!(read(&f.out("a/pretrain_loss.csv")).lines().count() >= 3);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(f.out("b/pretrained.ckpt")).unwrap());
    assert!(stderr(&a).contains("final pretraining loss"));
    let stdout = String::from_utf8_lossy(&a.stdout);
    assert!(stdout.contains("pretrained.ckpt"), "{stdout}");

    let manifest: serde_json::Value = serde_json::from_str(&read(&f.out("a/run_manifest_pretrain.json"))).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    let listed: Vec<&str> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(listed.contains(&"pretrained.ckpt") && listed.contains(&"pretrain_loss.csv"));
    assert!(manifest["timings_seconds"]["pretrain"].as_f64().unwrap() >= 0.0);
}

#[test]
fn missing_dataset_root_is_a_config_error() {
    let f = Fixture::new();
    let out = f.run("pretrain", "x", &["--dataset.root", "/nonexistent/rlcp-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dataset.root"), "{}", stderr(&out));
    assert!(
        !f.out("x").exists(),
        "validation must fail before any output is written"
    );
}

#[test]
fn unknown_keys_and_invalid_values_exit_2() {
    let f = Fixture::new();
    let out = f.run("pretrain", "x", &["--train.no_such_key", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no_such_key"), "{}", stderr(&out));
    let out = f.run("pretrain", "x", &["--train.clip_range", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.clip_range"));
    let out = rlcp(&["pretrain", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn finetune_eval_and_checkpoint_errors() {
    let f = Fixture::new();
    assert!(f.run("pretrain", "p", &[]).status.success());
    let pre = f.out("p/pretrained.ckpt");

    let ft = f.run(
        "finetune",
        "ft",
        &["--pretrained", pre.to_str().unwrap(), "--lambda", "0"],
    );
    assert!(ft.status.success(), "{}", stderr(&ft));
    let log = read(&f.out("ft/train_log.csv"));
    let mut lines = log.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for r in &rows {
        assert!(r[col("mean_kl")].is_finite());
        assert_eq!(
            r[col("total_loss")],
            r[col("surrogate")],
            "KL must not enter the total at lambda 0"
        );
    }
    let fine = f.out("ft/finetuned.ckpt");

    for (name, ck) in [("pre", &pre), ("fine", &fine)] {
        let ev = f.run("eval", &format!("ev_{name}"), &["--checkpoint", ck.to_str().unwrap()]);
        assert!(ev.status.success(), "{}", stderr(&ev));
    }
    let stem = pre.file_stem().unwrap().to_str().unwrap();
    let report = EvalReport::from_kv(&read(&f.out(&format!("ev_pre/eval_{stem}.txt")))).unwrap();
    EvalReport::from_kv(&read(&f.out("ev_fine/eval_finetuned.txt"))).unwrap();

    // the CL field agrees with a direct library call on the same inputs
    let cfg: toml::Table = read(&f.config).parse().unwrap();
    let root = PathBuf::from(cfg["dataset"]["root"].as_str().unwrap());
    let c = dataset::load_corpus::<f64>(&root, Path::new("copyright.tsv")).unwrap();
    let nc = dataset::load_corpus::<f64>(&root, Path::new("noncopyright.tsv")).unwrap();
    let seeds = LegSeeds::from_seed(3);
    let corpus = dataset::mix_corpus(&c, &nc, 0.5, 12, seeds.mix).unwrap();
    let enc = encoders::build_encoder::<f64>(&encoders::EncoderSpec {
        layer_widths: vec![4, 8],
        embedding_dim: 8,
        input_shape: (8, 8, 3),
        ..Default::default()
    })
    .unwrap();
    let ck = Checkpoint::<f64>::load(&pre).unwrap();
    let schedule = Schedule::from_params(&ck.schedule).unwrap();
    let w = rlcp_core::metric::MetricWeights::new(0.5, 0.5).unwrap();
    let direct = evaluate(&ck.model, &corpus, &enc, &schedule, &w, 6, seeds.eval).unwrap();
    assert_eq!(report.cl_pct, direct.cl_pct);

    let missing = f.run(
        "eval",
        "ev_missing",
        &["--checkpoint", f.out("nope.ckpt").to_str().unwrap()],
    );
    assert_ne!(missing.status.code(), Some(0));

    let corrupt = f.out("corrupt.ckpt");
    let mut bytes = fs::read(&pre).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&corrupt, bytes).unwrap();
    let out = f.run("finetune", "ft_bad", &["--pretrained", corrupt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));

    let out = f.run(
        "finetune",
        "ft_mismatch",
        &["--pretrained", pre.to_str().unwrap(), "--model.hidden", "5"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("architecture mismatch"), "{}", stderr(&out));
    let out = f.run(
        "finetune",
        "ft_mismatch",
        &["--pretrained", pre.to_str().unwrap(), "--schedule.beta_end", "0.2"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("schedule mismatch"), "{}", stderr(&out));
}

#[test]
fn heatmap_has_one_row_and_column_per_prompt() {
    let f = Fixture::new();
    let a = f.run("heatmap", "h1", &[]);
    assert!(a.status.success(), "{}", stderr(&a));
    let csv = read(&f.out("h1/heatmap.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines.iter().all(|l| l.split(',').count() == 5));
    assert!(f.out("h1/heatmap.png").is_file());
    assert!(read(&f.out("h1/run_manifest_heatmap.json")).contains("heatmap.png"));
    assert!(f.run("heatmap", "h2", &[]).status.success());
    assert_eq!(csv, read(&f.out("h2/heatmap.csv")));
    let too_many = f.run("heatmap", "h3", &["--heatmap.n", "50"]);
    assert_eq!(too_many.status.code(), Some(2));
}

#[test]
fn sweep_over_one_proportion_gives_one_row_and_repeats() {
    let f = Fixture::new();
    let a = f.run("sweep", "s1", &["--sweep.p_values", "[0.3]"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let csv = read(&f.out("s1/sweep.csv"));
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(f.out("s1/sweep.png").is_file());
    let b = f.run("sweep", "s2", &["--sweep.p_values", "[0.3]"]);
    assert!(b.status.success());
    assert_eq!(csv, read(&f.out("s2/sweep.csv")));
}

//! Tiny end-to-end legs: mix, pretrain, fine-tune, evaluate.

use rlcp_core::dataset::toy::{self, ToyCorpusSpec};
use rlcp_core::dataset::CorpusManifest;
use rlcp_core::ddpo::TrainConfig;
use rlcp_core::diffusion::{sample_trajectory, Checkpoint, DenoiserArch, PretrainConfig, ScheduleParams};
use rlcp_core::encoders::{build_encoder, ConvEncoder, EncoderSpec};
use rlcp_core::eval::{proportion_sweep, PipelineConfig};
use rlcp_core::scalar::Scalar;

fn config() -> PipelineConfig {
    PipelineConfig {
        corpus_size: 16,
        arch: DenoiserArch {
            image_shape: (8, 8, 3),
            hidden: 4,
            template_hidden: 3,
            time_dim: 4,
            prompt_dim: 8,
            steps: 6,
            ..Default::default()
        },
        schedule: ScheduleParams {
            steps: 6,
            beta_start: 0.01,
            beta_end: 0.1,
        },
        pretrain: PretrainConfig {
            epochs: 2,
            batch_size: 4,
            draws_per_image: 2,
            ..Default::default()
        },
        train: TrainConfig {
            iterations: 2,
            samples_per_iteration: 4,
            batch_size: 2,
            grad_updates_per_iteration: 2,
            ..Default::default()
        },
        n_generated: 6,
        ..Default::default()
    }
}

fn inputs<T: Scalar>() -> (CorpusManifest<T>, CorpusManifest<T>, ConvEncoder<T>) {
    let corpus = toy::generate::<T>(&ToyCorpusSpec {
        shape: (8, 8, 3),
        n_artworks: 4,
        n_photo_classes: 4,
        n_copyright: 16,
        n_noncopyright: 16,
        ..Default::default()
    })
    .unwrap();
    let enc = build_encoder(&EncoderSpec {
        layer_widths: vec![4, 8],
        embedding_dim: 8,
        input_shape: (8, 8, 3),
        ..Default::default()
    })
    .unwrap();
    (corpus.copyright, corpus.noncopyright, enc)
}

#[test]
fn leg_is_deterministic_and_complete() {
    let (c, nc, enc) = inputs::<f64>();
    let cfg = config();
    let a = cfg.run_leg(&c, &nc, &enc, 0.5, 7).unwrap();
    let b = cfg.run_leg(&c, &nc, &enc, 0.5, 7).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.finetuned.model.params(), b.finetuned.model.params());
    assert_eq!(
        a.finetuned.log.to_csv_deterministic(),
        b.finetuned.log.to_csv_deterministic()
    );
    assert_eq!(a.before, b.before);
    assert_eq!(a.after, b.after);

    assert_eq!(a.loss_curve.epochs.len(), 2);
    assert_eq!(a.finetuned.log.len(), 2);
    assert!(a.finetuned.abort.is_none());
    assert!(a.before.is_finite() && a.after.is_finite());
    assert_eq!(a.corpus.len(), 16);
    assert_eq!(a.corpus.measured_p_c(), 0.5);
    assert_ne!(a.pretrained.params(), a.finetuned.model.params());

    let c2 = cfg.run_leg(&c, &nc, &enc, 0.5, 8).unwrap();
    assert_ne!(a.pretrained.params(), c2.pretrained.params());
}

#[test]
fn zero_lambda_leaves_kl_out_of_the_total() {
    let (c, nc, enc) = inputs::<f64>();
    let mut cfg = config();
    cfg.train.lambda = 0.0;
    let leg = cfg.run_leg(&c, &nc, &enc, 0.5, 1).unwrap();
    for r in &leg.finetuned.log.records {
        assert_eq!(r.total_loss, r.surrogate);
        assert!(r.mean_kl.is_finite() && r.mean_kl >= 0.0);
    }
}

#[test]
fn single_precision_leg_runs() {
    let (c, nc, enc) = inputs::<f32>();
    let leg = config().run_leg(&c, &nc, &enc, 0.25, 2).unwrap();
    assert!(leg.after.is_finite());
    assert!(leg.finetuned.model.is_finite());
}

#[test]
fn checkpoint_round_trip_reproduces_samples() {
    let (c, nc, enc) = inputs::<f64>();
    let cfg = config();
    let leg = cfg.run_leg(&c, &nc, &enc, 0.5, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let schedule = rlcp_core::Schedule::from_params(&cfg.schedule).unwrap();
    Checkpoint::new(leg.finetuned.model.clone(), &schedule)
        .save(&path)
        .unwrap();
    let loaded = Checkpoint::<f64>::load(&path).unwrap();
    let prompt = toy::artwork_prompt(0);
    assert_eq!(
        sample_trajectory(&loaded.model, &loaded.schedule().unwrap(), &prompt, 5).unwrap(),
        sample_trajectory(&leg.finetuned.model, &schedule, &prompt, 5).unwrap()
    );
}

#[test]
fn sweep_rows_follow_proportions_then_seeds() {
    let (c, nc, enc) = inputs::<f64>();
    let (report, legs) = proportion_sweep(&[0.25, 0.75], &[0, 1], &config(), &c, &nc, &enc).unwrap();
    let keys: Vec<(f64, u64)> = report.rows.iter().map(|r| (r.p_c, r.seed)).collect();
    assert_eq!(keys, [(0.25, 0), (0.25, 1), (0.75, 0), (0.75, 1)]);
    assert_eq!(legs.len(), 4);
    for (row, leg) in report.rows.iter().zip(&legs) {
        assert_eq!(row.cl_pct, leg.after.cl_pct);
        assert_eq!(row.fid, leg.after.fid);
    }
    assert_eq!(report.to_csv().lines().count(), 5);
    assert!(proportion_sweep(&[0.5, 0.25], &[0], &config(), &c, &nc, &enc).is_err());
}

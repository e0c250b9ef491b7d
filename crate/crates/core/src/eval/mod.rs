//! Evaluation battery: copyright score, text agreement, pixel distance,
//! FID, heatmaps and the proportion sweep.

pub mod linalg;
mod metrics;
mod report;
mod sweep;

pub use linalg::{frechet_distance, mean_and_covariance, SquareMatrix};
pub use metrics::{clip_score, clip_score_embeddings, fid, fid_from_embeddings, l2_metric, mean_cl, text_embedding};
pub use report::{evaluate, evaluate_samples, generate_samples, heatmap_report, EvalReport, Sample};
pub use sweep::{proportion_sweep, spearman, LegResult, LegSeeds, PipelineConfig, SweepReport, SweepRow};

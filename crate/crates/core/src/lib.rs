//! Copyright-aware fine-tuning of a toy text-to-image diffusion model.
//!
//! The crate is generic over the floating-point type (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`, with `…32` variants for
//! single precision.

// Negated float comparisons are how validation rejects NaN alongside
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod dataset;
pub mod ddpo;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod image;
pub mod metric;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image = image::Image<f64>;
pub type Image32 = image::Image<f32>;
pub type Corpus = dataset::CorpusManifest<f64>;
pub type Corpus32 = dataset::CorpusManifest<f32>;
pub type Record = dataset::ImageRecord<f64>;
pub type ImageEncoder = encoders::ConvEncoder<f64>;
pub type ImageEncoder32 = encoders::ConvEncoder<f32>;
pub type Weights = metric::MetricWeights<f64>;
pub type Schedule = diffusion::NoiseSchedule<f64>;
pub type Schedule32 = diffusion::NoiseSchedule<f32>;
pub type Model = diffusion::Denoiser<f64>;
pub type Model32 = diffusion::Denoiser<f32>;

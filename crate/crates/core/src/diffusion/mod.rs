//! DDPM machinery: schedule, conditional denoiser, reverse-chain sampling,
//! base-model pretraining and checkpoints.

pub mod checkpoint;
pub mod denoiser;
pub mod pretrain;
pub mod sampling;
pub mod schedule;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use denoiser::{Denoiser, DenoiserArch, Forward};
pub use pretrain::{pretrain, LossCurve, PretrainConfig};
pub use sampling::{
    posterior_mean, reverse_step_distribution, sample_trajectory, step_logprob, to_model_space, to_pixel_space,
    Gaussian, Trajectory,
};
pub use schedule::{forward_sample, make_schedule, NoiseSchedule, ScheduleParams};

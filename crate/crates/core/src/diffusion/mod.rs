//! Toy pose-guided video denoiser: parameters, latent codec, noise schedule,
//! synthetic data, two-stage training, sampling and checkpoints.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod model;
pub mod params;
pub mod sample;
pub mod schedule;
pub mod train;

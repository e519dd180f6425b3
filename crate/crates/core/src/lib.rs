//! Mechanisms for pose-driven human animation with video diffusion:
//! skeleton re-targeting, pose-driven temperature maps, low-rank adapted
//! appearance attention, temporal layers and sliding-window fusion, plus a
//! small denoiser that exercises them end to end.

pub mod attention;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod longvideo;
pub mod pose;
pub mod ptm;
pub mod retarget;
pub mod rng;

pub use attention::{AttentionWeights, LatentVideo, LoraDelta, Matrix};
pub use error::{Error, Result};
pub use image::RgbImage;
pub use pose::{Keypoint, PoseFrame, PoseSequence, SkeletonTopology};
pub use ptm::{BinaryMask, DistanceMap, TemperatureMap};
pub use rng::SplitMix64;

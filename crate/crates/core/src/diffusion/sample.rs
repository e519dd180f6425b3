//! Ancestral DDPM sampling conditioned on a source image and poses.

use super::model::{condition_clip, eps_predict, Conditioning};
use super::params::DenoiserParams;
use super::schedule::NoiseSchedule;
use crate::attention::LatentVideo;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::pose::{default_stroke, rasterize_pose, PoseSequence, SkeletonTopology};
use crate::ptm::{pose_temperature_map, resize_map, TemperatureMap};
use crate::rng::SplitMix64;

/// Every Gaussian draw of one sampling run, generated up front in a fixed
/// order: the initial latent, then one tensor per step from `T` down to 2.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTape {
    pub initial: LatentVideo,
    /// `steps[t - 2]` is the noise added when stepping from `t` to `t - 1`.
    pub steps: Vec<LatentVideo>,
}

impl NoiseTape {
    pub fn draw(dims: (usize, usize, usize, usize, usize), steps: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let initial = LatentVideo::from_fn(dims, || rng.normal());
        let steps = (2..=steps)
            .map(|_| LatentVideo::from_fn(dims, || rng.normal()))
            .collect();
        Self { initial, steps }
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        Self {
            initial: self.initial.slice_frames(start, end),
            steps: self
                .steps
                .iter()
                .map(|z| z.slice_frames(start, end))
                .collect(),
        }
    }

    pub fn step_noise(&self, t: usize) -> Option<&LatentVideo> {
        if t >= 2 {
            self.steps.get(t - 2)
        } else {
            None
        }
    }
}

/// One reverse step `x_t -> x_{t-1}`; the noise term is omitted at `t = 1`.
pub fn ddpm_step(
    x_t: &LatentVideo,
    eps: &LatentVideo,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&LatentVideo>,
) -> LatentVideo {
    let beta = sched.beta(t);
    let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let mut data = x_t.data.clone();
    data.zip_mut_with(&eps.data, |x, e| *x = (*x - coef * e) * inv);
    if let (true, Some(z)) = (t > 1, noise) {
        let sigma = beta.sqrt();
        data.zip_mut_with(&z.data, |x, n| *x += sigma * n);
    }
    LatentVideo { data }
}

/// Temperature map of a pose window at the latent grid.
pub fn window_tmap(poses: &PoseSequence, tau: f64, h: usize, w: usize) -> Result<TemperatureMap> {
    let stroke = default_stroke(poses.width, poses.height);
    let full = pose_temperature_map(poses, &SkeletonTopology::body18(), stroke, tau)?;
    resize_map(&full, h, w)
}

/// Rasterized pose frames at canvas resolution.
pub fn render_poses(poses: &PoseSequence) -> Vec<RgbImage> {
    let topo = SkeletonTopology::body18();
    let stroke = default_stroke(poses.width, poses.height);
    poses
        .frames
        .iter()
        .map(|f| rasterize_pose(f, poses.width, poses.height, &topo, stroke))
        .collect()
}

/// Conditioning plus temperature map for one pose window.
pub fn window_conditioning(
    params: &DenoiserParams,
    source: &RgbImage,
    poses: &PoseSequence,
    tau: Option<f64>,
) -> Result<(Conditioning, Option<TemperatureMap>)> {
    poses.validate()?;
    let cond = condition_clip(params, &render_poses(poses), source)?;
    let tmap = match tau {
        Some(tau) => Some(window_tmap(
            poses,
            tau,
            params.dims.grid_h,
            params.dims.grid_w,
        )?),
        None => None,
    };
    Ok((cond, tmap))
}

/// Denoises from the tape's initial latent down to `x_0`.
pub fn sample_with_tape(
    params: &DenoiserParams,
    cond: &Conditioning,
    tmap: Option<&TemperatureMap>,
    sched: &NoiseSchedule,
    tape: &NoiseTape,
) -> Result<LatentVideo> {
    if tape.steps.len() + 1 != sched.steps() {
        return Err(Error::shape("noise tape length differs from the schedule"));
    }
    let mut x = tape.initial.clone();
    for t in (1..=sched.steps()).rev() {
        let eps = eps_predict(params, &x, t, cond, tmap)?;
        x = ddpm_step(&x, &eps, t, sched, tape.step_noise(t));
    }
    Ok(x)
}

/// Samples an `f`-frame latent clip for `poses`, tempering temporal
/// attention with the window's PTM when `tau` is given.
pub fn sample(
    params: &DenoiserParams,
    source: &RgbImage,
    poses: &PoseSequence,
    sched: &NoiseSchedule,
    tau: Option<f64>,
    seed: u64,
) -> Result<LatentVideo> {
    let (cond, tmap) = window_conditioning(params, source, poses, tau)?;
    let d = params.dims;
    let tape = NoiseTape::draw(
        (1, d.channels, poses.len(), d.grid_h, d.grid_w),
        sched.steps(),
        seed,
    );
    sample_with_tape(params, &cond, tmap.as_ref(), sched, &tape)
}

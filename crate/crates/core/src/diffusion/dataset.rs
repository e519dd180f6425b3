//! Synthetic blob videos driven by random smooth skeleton motion.
//!
//! Each clip animates a BODY-18 figure by forward kinematics: the neck
//! follows a slow sinusoidal path and every bone swings about its rest
//! direction. The target video shows a red Gaussian blob on the neck and a
//! green one on the nose over a per-clip blue tint; the source image is the
//! first target frame.

use std::f64::consts::TAU;

use super::codec::LatentCodec;
use super::model::{cell_features, frames_cell_features};
use crate::attention::{LatentVideo, Matrix};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::pose::{
    default_stroke, rasterize_pose, Keypoint, PoseFrame, PoseSequence, SkeletonTopology, NECK,
    NOSE, NUM_KEYPOINTS,
};
use crate::rng::SplitMix64;

/// Rest offset of each keypoint from its parent (pixels at scale 1).
const REST_OFFSETS: [(f64, f64); NUM_KEYPOINTS] = [
    (0.0, -7.0),  // nose
    (0.0, 0.0),   // neck
    (-6.0, 1.0),  // right shoulder
    (-2.0, 8.0),  // right elbow
    (-1.0, 7.0),  // right wrist
    (6.0, 1.0),   // left shoulder
    (2.0, 8.0),   // left elbow
    (1.0, 7.0),   // left wrist
    (-4.0, 14.0), // right hip
    (0.0, 9.0),   // right knee
    (0.0, 8.0),   // right ankle
    (4.0, 14.0),  // left hip
    (0.0, 9.0),   // left knee
    (0.0, 8.0),   // left ankle
    (-2.0, -2.0), // right eye
    (2.0, -2.0),  // left eye
    (-2.0, 1.0),  // right ear
    (2.0, 1.0),   // left ear
];

const NECK_SIGMA: f64 = 4.0;
const NOSE_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub canvas: usize,
    pub frames: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl DatasetSpec {
    pub fn new(channels: usize, grid_h: usize, grid_w: usize) -> Self {
        Self {
            canvas: 64,
            frames: 16,
            channels,
            grid_h,
            grid_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub source: RgbImage,
    pub poses: PoseSequence,
    pub frames: Vec<RgbImage>,
    /// Latent clip `(1, c, F, h, w)`.
    pub target: LatentVideo,
    /// Cell features of the rasterized poses, one row per latent token.
    pub pose_cells: Matrix,
    pub source_cells: Matrix,
}

struct Swing {
    amplitude: f64,
    freq: f64,
    phase: f64,
}

impl Swing {
    fn random(rng: &mut SplitMix64, max_amp: f64) -> Self {
        Self {
            amplitude: rng.uniform_range(-max_amp, max_amp),
            freq: rng.uniform_range(0.02, 0.08),
            phase: rng.uniform_range(0.0, TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amplitude * (TAU * self.freq * t + self.phase).sin()
    }
}

fn random_trajectory(
    rng: &mut SplitMix64,
    spec: &DatasetSpec,
    topo: &SkeletonTopology,
) -> Vec<PoseFrame> {
    let canvas = spec.canvas as f64;
    let scale = rng.uniform_range(0.8, 1.1) * canvas / 64.0;
    let base = (
        canvas / 2.0 + rng.uniform_range(-6.0, 6.0),
        canvas * 0.3 + rng.uniform_range(-3.0, 3.0),
    );
    let drift = [Swing::random(rng, 8.0), Swing::random(rng, 4.0)];
    let swings: Vec<Swing> = (0..NUM_KEYPOINTS)
        .map(|_| Swing::random(rng, 0.5))
        .collect();

    (0..spec.frames)
        .map(|i| {
            let t = i as f64;
            let mut frame = PoseFrame::missing();
            let mut angle = [0.0; NUM_KEYPOINTS];
            for &k in topo.bfs_order() {
                let kp = match topo.parent(k) {
                    None => (base.0 + drift[0].at(t), base.1 + drift[1].at(t)),
                    Some(p) => {
                        angle[k] = angle[p] + swings[k].at(t);
                        let (dx, dy) = REST_OFFSETS[k];
                        let (s, c) = angle[k].sin_cos();
                        let parent = frame.keypoints[p];
                        (
                            parent.x + scale * (c * dx - s * dy),
                            parent.y + scale * (s * dx + c * dy),
                        )
                    }
                };
                frame.keypoints[k] =
                    Keypoint::visible(kp.0.clamp(0.0, canvas - 1.0), kp.1.clamp(0.0, canvas - 1.0));
            }
            frame
        })
        .collect()
}

/// Renders the blob frame for one pose: red Gaussian on the neck, green on
/// the nose, constant blue tint.
pub fn render_blobs(frame: &PoseFrame, width: usize, height: usize, tint: u8) -> RgbImage {
    let neck = frame.get(NECK);
    let nose = frame.get(NOSE);
    let blob = |kp: &Keypoint, sigma: f64, x: f64, y: f64| {
        if !kp.is_present() {
            return 0.0;
        }
        let d2 = (x - kp.x).powi(2) + (y - kp.y).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let mut img = RgbImage::black(width, height);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            let r = blob(neck, NECK_SIGMA, fx, fy);
            let g = blob(nose, NOSE_SIGMA, fx, fy);
            img.set(
                x,
                y,
                [(255.0 * r).round() as u8, (255.0 * g).round() as u8, tint],
            );
        }
    }
    img
}

/// `n` clips, deterministic in `(n, seed, spec)`.
pub fn make_synthetic_dataset(
    n: usize,
    seed: u64,
    spec: &DatasetSpec,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    if spec.frames == 0 || spec.canvas == 0 {
        return Err(Error::invalid("dataset frames and canvas must be positive"));
    }
    let codec = LatentCodec::new(spec.channels)?;
    let topo = SkeletonTopology::body18();
    let stroke = default_stroke(spec.canvas, spec.canvas);
    (0..n)
        .map(|i| {
            let mut rng = SplitMix64::fork(seed, i as u64);
            let poses = PoseSequence::new(
                spec.canvas,
                spec.canvas,
                random_trajectory(&mut rng, spec, &topo),
            )?;
            let tint = (rng.uniform_range(0.1, 0.5) * 255.0).round() as u8;
            let frames: Vec<RgbImage> = poses
                .frames
                .iter()
                .map(|f| render_blobs(f, spec.canvas, spec.canvas, tint))
                .collect();
            let rasters: Vec<RgbImage> = poses
                .frames
                .iter()
                .map(|f| rasterize_pose(f, spec.canvas, spec.canvas, &topo, stroke))
                .collect();
            let source = frames[0].clone();
            Ok(SyntheticSample {
                target: codec.encode_frames(&frames, spec.grid_h, spec.grid_w),
                pose_cells: frames_cell_features(&rasters, spec.grid_h, spec.grid_w),
                source_cells: cell_features(&source, spec.grid_h, spec.grid_w),
                source,
                poses,
                frames,
            })
        })
        .collect()
}

//! Pose-driven temperature maps.
//!
//! A window of rasterized pose frames is reduced to a presence mask, the mask
//! to an exact Euclidean distance map normalized by the half-diagonal, and the
//! distance map to a per-pixel softmax temperature `tau * D + 1`.

use crate::error::{Error, Result};
use crate::image::{self, area_weights, RgbImage, BLACK};
use crate::pose::{rasterize_pose, PoseSequence, SkeletonTopology};

pub const DEFAULT_TAU: f64 = 3.0;

const TMAP_MAGIC: &[u8; 4] = b"TMAP";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DistanceMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub tau: f64,
}

impl TemperatureMap {
    /// A map of all ones, equivalent to untempered attention.
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![1.0; width * height],
            tau: 0.0,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Binary float map: `"TMAP"`, u32 H, u32 W, u32 reserved, then H*W
    /// little-endian f64 values row-major.
    pub fn to_tmap_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(TMAP_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a TMAP buffer. The result has `tau = NaN` since the format does
    /// not carry it.
    pub fn from_tmap_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != TMAP_MAGIC {
            return Err(Error::Image("not a TMAP buffer".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (height, width) = (word(4), word(8));
        let payload = &bytes[16..];
        if payload.len() != height * width * 8 {
            return Err(Error::Image(format!(
                "TMAP payload is {} bytes, expected {}",
                payload.len(),
                height * width * 8
            )));
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            values,
            tau: f64::NAN,
        })
    }

    /// 16-bit PGM mapping `[1, 2 tau + 1]` linearly onto `[0, 65535]`.
    pub fn to_pgm_preview(&self) -> Vec<u8> {
        let q = image::quantize_u16(&self.values, 1.0, 2.0 * self.tau + 1.0);
        image::pgm16(self.width, self.height, &q)
    }
}

/// Union over frames of the non-black pixels.
pub fn presence_mask(images: &[RgbImage]) -> Result<BinaryMask> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("presence mask needs at least one frame"))?;
    let (w, h) = (first.width(), first.height());
    let mut mask = BinaryMask::empty(w, h);
    for (i, img) in images.iter().enumerate() {
        if img.width() != w || img.height() != h {
            return Err(Error::shape(format!(
                "frame {i} is {}x{}, expected {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        for (bit, px) in mask.bits.iter_mut().zip(img.pixels()) {
            *bit |= *px != BLACK;
        }
    }
    Ok(mask)
}

/// Exact Euclidean distance to the nearest set pixel, divided by
/// `sqrt((H/2)^2 + (W/2)^2)`. An empty mask yields 1 everywhere.
pub fn distance_map(mask: &BinaryMask) -> DistanceMap {
    let (w, h) = (mask.width, mask.height);
    let norm = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
    if !mask.bits.iter().any(|b| *b) {
        return DistanceMap {
            width: w,
            height: h,
            values: vec![1.0; w * h],
        };
    }
    let sq = squared_edt(mask);
    DistanceMap {
        width: w,
        height: h,
        values: sq.into_iter().map(|d| d.sqrt() / norm).collect(),
    }
}

/// Separable lower-envelope squared distance transform (Felzenszwalb &
/// Huttenlocher). All intermediate values are integers held in f64, so the
/// result is exact.
fn squared_edt(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    let n = w.max(h);
    let mut grid: Vec<f64> = mask
        .bits
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();

    let mut scratch = Scratch::new(n);
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];

    for x in 0..w {
        for y in 0..h {
            line[y] = grid[y * w + x];
        }
        scratch.transform(&line[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        line[..w].copy_from_slice(row);
        scratch.transform(&line[..w], &mut out[..w]);
        row.copy_from_slice(&out[..w]);
    }
    grid
}

struct Scratch {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    /// 1-D squared distance transform of sampled function `f` into `d`.
    fn transform(&mut self, f: &[f64], d: &mut [f64]) {
        let n = f.len();
        let Some(first) = f.iter().position(|v| v.is_finite()) else {
            d.fill(f64::INFINITY);
            return;
        };
        let (v, z) = (&mut self.v, &mut self.z);
        let mut k = 0usize;
        v[0] = first;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in first + 1..n {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2.0 * q as f64 - 2.0 * p as f64);
                if s <= z[k] {
                    // k > 0 here: z[0] is -inf.
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        let mut k = 0usize;
        for (q, out) in d.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            let diff = q as f64 - p as f64;
            *out = diff * diff + f[p];
        }
    }
}

/// `tau * D + 1`, elementwise.
pub fn temperature_map(d: &DistanceMap, tau: f64) -> Result<TemperatureMap> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!(
            "tau must be finite and >= 0, got {tau}"
        )));
    }
    Ok(TemperatureMap {
        width: d.width,
        height: d.height,
        values: d.values.iter().map(|&v| tau * v + 1.0).collect(),
        tau,
    })
}

/// Resizes separably: area averaging along an axis that shrinks, bilinear
/// interpolation (half-pixel centers, edge clamped) along one that grows.
pub fn resize_map(t: &TemperatureMap, h: usize, w: usize) -> Result<TemperatureMap> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "target size {h}x{w} must be positive"
        )));
    }
    let wx = axis_weights(t.width, w);
    let wy = axis_weights(t.height, h);

    let mut rows = vec![0.0; t.height * w];
    for y in 0..t.height {
        for (x, weights) in wx.iter().enumerate() {
            rows[y * w + x] = weights
                .iter()
                .map(|&(sx, a)| a * t.values[y * t.width + sx])
                .sum();
        }
    }
    let mut values = vec![0.0; h * w];
    for (y, weights) in wy.iter().enumerate() {
        for x in 0..w {
            values[y * w + x] = weights.iter().map(|&(sy, a)| a * rows[sy * w + x]).sum();
        }
    }
    Ok(TemperatureMap {
        width: w,
        height: h,
        values,
        tau: t.tau,
    })
}

fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    if dst == src {
        return (0..src).map(|i| vec![(i, 1.0)]).collect();
    }
    if dst < src {
        return area_weights(src, dst);
    }
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let frac = pos - lo as f64;
            if hi == lo || frac == 0.0 {
                vec![(lo, 1.0)]
            } else {
                vec![(lo, 1.0 - frac), (hi, frac)]
            }
        })
        .collect()
}

/// Rasterizes a pose window and computes its temperature map at canvas
/// resolution.
pub fn pose_temperature_map(
    poses: &PoseSequence,
    topology: &SkeletonTopology,
    stroke: usize,
    tau: f64,
) -> Result<TemperatureMap> {
    let frames: Vec<RgbImage> = poses
        .frames
        .iter()
        .map(|f| rasterize_pose(f, poses.width, poses.height, topology, stroke))
        .collect();
    let mask = presence_mask(&frames)?;
    temperature_map(&distance_map(&mask), tau)
}

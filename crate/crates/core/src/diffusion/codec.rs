//! Fixed linear map between downsampled RGB and `c`-channel latents.

use ndarray::{s, Array5};

use crate::attention::{LatentVideo, Matrix};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng::SplitMix64;

const BASIS_SEED: u64 = 0x7c0d_ec00;

/// Each latent cell is `(2·rgb − 1)·basis`, where the three basis rows are
/// orthogonal with squared norm `c / 3`. Decoding applies the pseudo-inverse
/// and upsamples by nearest neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    basis: Matrix,
}

impl LatentCodec {
    pub fn new(channels: usize) -> Result<Self> {
        if channels < 3 {
            return Err(Error::invalid("latent needs at least 3 channels"));
        }
        let mut rng = SplitMix64::new(BASIS_SEED);
        let mut basis = Matrix::zeros((3, channels));
        for i in 0..3 {
            let mut v: Vec<f64> = (0..channels).map(|_| rng.normal()).collect();
            for j in 0..i {
                let row = basis.row(j);
                let dot: f64 = v.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(row.iter()) {
                    *a -= dot * b;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for (k, a) in v.iter().enumerate() {
                basis[[i, k]] = a / norm;
            }
        }
        basis *= (channels as f64 / 3.0).sqrt();
        Ok(Self { basis })
    }

    pub fn channels(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// One latent row per cell of the `h × w` grid, row-major.
    pub fn encode_image(&self, image: &RgbImage, h: usize, w: usize) -> Matrix {
        let cells = image.area_cells(h, w);
        let mut centered = Matrix::zeros((h * w, 3));
        for (i, rgb) in cells.iter().enumerate() {
            for ch in 0..3 {
                centered[[i, ch]] = 2.0 * rgb[ch] - 1.0;
            }
        }
        centered.dot(&self.basis)
    }

    /// Latent clip of shape `(1, c, frames, h, w)`.
    pub fn encode_frames(&self, frames: &[RgbImage], h: usize, w: usize) -> LatentVideo {
        let c = self.channels();
        let mut data = Array5::zeros((1, c, frames.len(), h, w));
        for (f, img) in frames.iter().enumerate() {
            let rows = self.encode_image(img, h, w);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data[[0, ch, f, y, x]] = rows[[y * w + x, ch]];
                    }
                }
            }
        }
        LatentVideo { data }
    }

    /// Per-cell RGB in [0, 1] (clamped) for one frame of one batch element.
    pub fn decode_cells(&self, z: &LatentVideo, b: usize, frame: usize) -> Vec<[f64; 3]> {
        let (_, c, _, h, w) = z.dims();
        let gram = c as f64 / 3.0;
        let plane = z.data.slice(s![b, .., frame, .., ..]);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut rgb = [0.0; 3];
                for (ch, v) in rgb.iter_mut().enumerate() {
                    let dot: f64 = (0..c).map(|k| plane[[k, y, x]] * self.basis[[ch, k]]).sum();
                    *v = ((dot / gram + 1.0) / 2.0).clamp(0.0, 1.0);
                }
                out.push(rgb);
            }
        }
        out
    }

    /// Decodes a frame to a `width × height` image by nearest-neighbour
    /// upsampling of the latent grid. Non-finite latents are an error.
    pub fn decode_frame(
        &self,
        z: &LatentVideo,
        b: usize,
        frame: usize,
        width: usize,
        height: usize,
    ) -> Result<RgbImage> {
        let (_, c, f, h, w) = z.dims();
        if c != self.channels() || frame >= f {
            return Err(Error::shape(format!(
                "cannot decode frame {frame} of latent {:?} with a {}-channel codec",
                z.dims(),
                self.channels()
            )));
        }
        if !z
            .data
            .slice(s![b, .., frame, .., ..])
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite(format!("latent frame {frame}")));
        }
        let cells = self.decode_cells(z, b, frame);
        let mut img = RgbImage::black(width, height);
        for py in 0..height {
            let y = (py * h / height).min(h - 1);
            for px in 0..width {
                let x = (px * w / width).min(w - 1);
                let rgb = cells[y * w + x];
                img.set(px, py, rgb.map(|v| (v * 255.0).round() as u8));
            }
        }
        Ok(img)
    }
}

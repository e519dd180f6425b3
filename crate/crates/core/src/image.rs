//! RGB raster images and the Netpbm encodings used for image output.

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

pub const BLACK: Rgb = [0, 0, 0];

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl RgbImage {
    /// All-black image. Panics if a dimension is zero.
    pub fn black(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            pixels: vec![BLACK; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("invalid dimensions {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Image(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: Rgb) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn is_black(&self) -> bool {
        self.pixels.iter().all(|p| *p == BLACK)
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut header = NetpbmHeader::new(bytes);
        let magic = header.token()?;
        if magic != "P6" {
            return Err(Error::Image(format!("expected P6 magic, found {magic:?}")));
        }
        let width = header.number()?;
        let height = header.number()?;
        let maxval = header.number()?;
        if maxval != 255 {
            return Err(Error::Image(format!("unsupported maxval {maxval}")));
        }
        let data = header.payload()?;
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("invalid dimensions {width}x{height}")));
        }
        let expected = width * height * 3;
        if data.len() < expected {
            return Err(Error::Image(format!(
                "truncated payload: expected {expected} bytes, got {}",
                data.len()
            )));
        }
        let pixels = data[..expected]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Self::from_pixels(width, height, pixels)
    }

    /// Per-cell mean RGB in [0, 1] on an `rows x cols` grid, using exact
    /// area weights over each cell's preimage. Output is row-major cells.
    pub fn area_cells(&self, rows: usize, cols: usize) -> Vec<[f64; 3]> {
        let wy = area_weights(self.height, rows);
        let wx = area_weights(self.width, cols);
        let mut out = vec![[0.0; 3]; rows * cols];
        for (r, row_w) in wy.iter().enumerate() {
            for (c, col_w) in wx.iter().enumerate() {
                let mut acc = [0.0; 3];
                for &(y, a) in row_w {
                    for &(x, b) in col_w {
                        let p = self.get(x, y);
                        let wgt = a * b;
                        for ch in 0..3 {
                            acc[ch] += wgt * p[ch] as f64;
                        }
                    }
                }
                out[r * cols + c] = acc.map(|v| v / 255.0);
            }
        }
        out
    }
}

/// For each of `dst` output cells, the source indices it overlaps with their
/// normalized overlap weights. Works for any ratio.
pub(crate) fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let mut weights: Vec<(usize, f64)> = (first..last)
                .filter_map(|j| {
                    let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap))
                })
                .collect();
            let total: f64 = weights.iter().map(|w| w.1).sum();
            for w in &mut weights {
                w.1 /= total;
            }
            weights
        })
        .collect()
}

/// 16-bit binary PGM (P5, big-endian samples per the Netpbm convention).
pub fn pgm16(width: usize, height: usize, samples: &[u16]) -> Vec<u8> {
    assert_eq!(samples.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

/// Linearly maps `values` from `[lo, hi]` onto the 16-bit range, clamping.
/// A degenerate range maps everything to zero.
pub fn quantize_u16(values: &[f64], lo: f64, hi: f64) -> Vec<u16> {
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span <= 0.0 || !v.is_finite() {
                0
            } else {
                (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16
            }
        })
        .collect()
}

struct NetpbmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> NetpbmHeader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Image("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::Image(format!("bad header field {tok:?}")))
    }

    // Exactly one whitespace byte separates the header from the raster.
    fn payload(self) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() {
            return Err(Error::Image("missing raster".into()));
        }
        Ok(&self.bytes[self.pos + 1..])
    }
}

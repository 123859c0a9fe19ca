//! Grayscale image container, PGM I/O, the bilinear baseline and quality metrics.
//!
//! Luminance is stored as `f64` with `-1` for black and `+1` for white. Pixels are
//! stacked row-major, and pixel centers sit at half-integer offsets from the image
//! center, which is the coordinate frame the observation model uses.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("pixel {i} is not finite")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(width, height, data)
    }

    /// Build from 8-bit gray levels using `v -> 2 v / 255 - 1`.
    pub fn from_gray8(width: usize, height: usize, levels: &[u8]) -> Result<Self> {
        Self::new(width, height, levels.iter().map(|&v| level_to_luminance(v as f64, 255.0)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Quantize to 8-bit gray levels (clamped, rounded half away from zero).
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&x| luminance_to_level(x)).collect()
    }

    fn same_shape(&self, other: &GrayImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

#[inline]
fn level_to_luminance(v: f64, maxval: f64) -> f64 {
    2.0 * (v / maxval) - 1.0
}

#[inline]
fn luminance_to_level(x: f64) -> u8 {
    ((x + 1.0) * 0.5 * 255.0).clamp(0.0, 255.0).round() as u8
}

/// Parse an 8-bit PGM (`P2` ASCII or `P5` binary) from memory.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(cur.error("expected magic number P2 or P5")),
    };
    cur.pos = 2;
    let width = cur.header_number("width")?;
    let height = cur.header_number("height")?;
    let maxval = cur.header_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.error("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(cur.error(&format!("maxval {maxval} is not an 8-bit range")));
    }
    let n = width * height;
    let maxval = maxval as f64;
    let mut data = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        if !cur.peek().is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(cur.error("missing whitespace after header"));
        }
        cur.pos += 1;
        let raster = &bytes[cur.pos..];
        if raster.len() < n {
            return Err(Error::Parse {
                offset: bytes.len(),
                message: format!("truncated raster: expected {n} bytes, found {}", raster.len()),
            });
        }
        for &v in &raster[..n] {
            if v as f64 > maxval {
                return Err(cur.error(&format!("sample {v} exceeds maxval")));
            }
            data.push(level_to_luminance(v as f64, maxval));
        }
    } else {
        for _ in 0..n {
            let v = cur.header_number("sample")?;
            if v as f64 > maxval {
                return Err(cur.error(&format!("sample {v} exceeds maxval")));
            }
            data.push(level_to_luminance(v as f64, maxval));
        }
    }
    GrayImage::new(width, height, data)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn error(&self, message: &str) -> Error {
        Error::Parse { offset: self.pos, message: message.to_string() }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(b) = self.peek() {
                    self.pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn header_number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.peek() {
                None => self.error(&format!("unexpected end of data reading {what}")),
                Some(_) => self.error(&format!("expected decimal {what}")),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse { offset: start, message: format!("{what} out of range") })
    }
}

/// Serialize as binary `P5` with maxval 255.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_gray8());
    out
}

/// Serialize as ASCII `P2` with maxval 255.
pub fn encode_pgm_ascii(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P2\n{} {}\n255\n", image.width, image.height);
    for row in image.to_gray8().chunks(image.width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}

pub fn save_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(image))?;
    Ok(())
}

/// Center of pixel `index` along an axis of `len` pixels, with the axis center at 0.
#[inline]
pub fn pixel_center(index: usize, len: usize) -> f64 {
    index as f64 - (len as f64 - 1.0) * 0.5
}

/// Bilinear sample at a point given in centered pixel coordinates
/// (`h` rightward, `v` downward). Samples outside the pixel-center hull are
/// clamped to the border.
pub fn bilinear_sample(img: &GrayImage, h: f64, v: f64) -> f64 {
    let x = (h + (img.width as f64 - 1.0) * 0.5).clamp(0.0, (img.width - 1) as f64);
    let y = (v + (img.height as f64 - 1.0) * 0.5).clamp(0.0, (img.height - 1) as f64);
    let c0 = (x.floor() as usize).min(img.width.saturating_sub(2));
    let r0 = (y.floor() as usize).min(img.height.saturating_sub(2));
    let c1 = (c0 + 1).min(img.width - 1);
    let r1 = (r0 + 1).min(img.height - 1);
    let fx = x - c0 as f64;
    let fy = y - r0 as f64;
    let top = img.get(r0, c0) * (1.0 - fx) + img.get(r0, c1) * fx;
    let bottom = img.get(r1, c0) * (1.0 - fx) + img.get(r1, c1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Upsample by `factor` with bilinear interpolation on the centered pixel grid.
pub fn bilinear_upsample(img: &GrayImage, factor: f64) -> Result<GrayImage> {
    if !(factor > 1.0 && factor.is_finite()) {
        return Err(Error::Domain(format!("upsampling factor must exceed 1, got {factor}")));
    }
    let size = |n: usize| -> Result<usize> {
        let target = n as f64 * factor;
        let rounded = target.round();
        if (target - rounded).abs() > 1e-9 {
            return Err(Error::Dimension(format!("{n} x {factor} is not an integral size")));
        }
        Ok(rounded as usize)
    };
    let (w, h) = (size(img.width)?, size(img.height)?);
    GrayImage::from_fn(w, h, |r, c| {
        bilinear_sample(img, pixel_center(c, w) / factor, pixel_center(r, h) / factor)
    })
}

/// Pixelwise mean of equally sized frames.
pub fn mean_image(frames: &[GrayImage]) -> Result<GrayImage> {
    let first = frames.first().ok_or_else(|| Error::Dimension("no frames to average".into()))?;
    let mut acc = vec![0.0; first.len()];
    for f in frames {
        first.same_shape(f)?;
        for (a, v) in acc.iter_mut().zip(&f.data) {
            *a += v;
        }
    }
    let n = frames.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    GrayImage::new(first.width, first.height, acc)
}

/// Mean squared error between two images of equal size.
pub fn mse(estimate: &GrayImage, truth: &GrayImage) -> Result<f64> {
    estimate.same_shape(truth)?;
    let sum: f64 = estimate.data.iter().zip(&truth.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / estimate.len() as f64)
}

/// Peak signal-to-noise ratio in dB for the `[-1, 1]` luminance range (peak 2).
/// Identical images give `+inf`.
pub fn psnr(estimate: &GrayImage, truth: &GrayImage) -> Result<f64> {
    let m = mse(estimate, truth)?;
    Ok(psnr_from_mse(m))
}

#[inline]
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (4.0 / mse).log10()
    }
}

/// PSNR improvement of a proposed estimate over a baseline.
#[inline]
pub fn isnr(proposed_psnr: f64, baseline_psnr: f64) -> f64 {
    proposed_psnr - baseline_psnr
}

//! Image ingest and preprocessing: decode, fuzzy denoise, resize, normalise.

use std::io::Cursor;

use image::{ImageFormat, ImageReader, Limits};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Network input resolution (square).
pub const INPUT_SIZE: usize = 128;

/// Largest accepted decoded dimension on either axis.
const MAX_DECODE_DIM: u32 = 16_384;
const MAX_DECODE_ALLOC: u64 = 512 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!("zero dimension {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(ImageError::Invalid(format!(
                "expected {} bytes for {width}x{height}, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| ImageError::Encode("buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png).map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// Decode a PNG or JPEG stream to 8-bit RGB. Alpha is dropped and grayscale
/// is expanded to three channels.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    let mut reader =
        ImageReader::new(Cursor::new(bytes)).with_guessed_format().map_err(|e| ImageError::Decode(e.to_string()))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        Some(other) => return Err(ImageError::Decode(format!("unsupported format {other:?}"))),
        None => return Err(ImageError::Decode("unrecognized image format".into())),
    }
    let mut limits = Limits::default();
    limits.max_image_width = Some(MAX_DECODE_DIM);
    limits.max_image_height = Some(MAX_DECODE_DIM);
    limits.max_alloc = Some(MAX_DECODE_ALLOC);
    reader.limits(limits);
    let decoded = reader.decode().map_err(|e| ImageError::Decode(e.to_string()))?;
    let rgb = decoded.into_rgb8();
    let (w, h) = rgb.dimensions();
    RgbImage::new(w as usize, h as usize, rgb.into_raw())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzyFilterConfig {
    pub window: usize,
    pub threshold: f64,
}

impl Default for FuzzyFilterConfig {
    fn default() -> Self {
        Self { window: 3, threshold: 64.0 }
    }
}

impl FuzzyFilterConfig {
    pub fn validate(&self) -> Result<(), ImageError> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(ImageError::Argument(format!("fuzzy window must be odd and >= 3, got {}", self.window)));
        }
        if !(self.threshold > 0.0 && self.threshold <= 255.0) {
            return Err(ImageError::Argument(format!("fuzzy threshold must lie in (0, 255], got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Edge-preserving denoiser. Each neighbour in the window is weighted by a
/// triangular membership of its intensity distance to the centre pixel,
/// `max(0, 1 - |I_n - I_c| / T)`, and the output is the weighted mean.
/// Borders replicate the edge pixels.
pub fn fuzzy_filter(img: &RgbImage, cfg: &FuzzyFilterConfig) -> Result<RgbImage, ImageError> {
    cfg.validate()?;
    let (w, h) = (img.width as isize, img.height as isize);
    let r = (cfg.window / 2) as isize;
    let inv_t = 1.0 / cfg.threshold;
    let mut out = vec![0u8; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let centre = img.channel(x as usize, y as usize, c) as f64;
                let (mut num, mut den) = (0.0f64, 0.0f64);
                for dy in -r..=r {
                    let sy = (y + dy).clamp(0, h - 1) as usize;
                    for dx in -r..=r {
                        let sx = (x + dx).clamp(0, w - 1) as usize;
                        let v = img.channel(sx, sy, c) as f64;
                        let mu = (1.0 - (v - centre).abs() * inv_t).max(0.0);
                        num += mu * v;
                        den += mu;
                    }
                }
                // den >= 1: the centre always has full membership.
                out[((y * w + x) * 3) as usize + c] = (num / den).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::new(img.width, img.height, out)
}

/// Bilinear resize with half-pixel-centre sampling.
pub fn resize_bilinear(img: &RgbImage, out_w: usize, out_h: usize) -> Result<RgbImage, ImageError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImageError::Argument(format!("target size {out_w}x{out_h} has a zero dimension")));
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let scale = src_len as f64 / dst_len as f64;
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, img.width, out_w)).collect();
    let mut pixels = Vec::with_capacity(out_w * out_h * 3);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, img.height, out_h);
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let p00 = img.channel(x0, y0, c) as f64;
                let p10 = img.channel(x1, y0, c) as f64;
                let p01 = img.channel(x0, y1, c) as f64;
                let p11 = img.channel(x1, y1, c) as f64;
                let top = p00 + (p10 - p00) * fx;
                let bottom = p01 + (p11 - p01) * fx;
                let v = top + (bottom - top) * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(out_w, out_h, pixels)
}

/// Scale to `[0, 1]` as an `[H, W, 3]` tensor. The image must already have
/// the requested input size.
pub fn to_input_tensor(img: &RgbImage, size: usize) -> Result<Tensor, ImageError> {
    if img.width != size || img.height != size {
        return Err(ImageError::Tensor(TensorError::Mismatch {
            op: "to_input_tensor",
            left: vec![img.height, img.width, 3],
            right: vec![size, size, 3],
        }));
    }
    let data = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Tensor::from_vec([img.height, img.width, 3], data)?)
}

/// Full inference-time preprocessing: denoise, resize, normalise.
pub fn preprocess(img: &RgbImage, fuzzy: &FuzzyFilterConfig, size: usize) -> Result<Tensor, ImageError> {
    let filtered = fuzzy_filter(img, fuzzy)?;
    let resized = resize_bilinear(&filtered, size, size)?;
    to_input_tensor(&resized, size)
}

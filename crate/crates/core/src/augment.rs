//! Geometric augmentation: rotation, width/height shift, shear, zoom and
//! horizontal flip, composed into one affine warp with one resampling pass.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledImage;
use crate::image::RgbImage;
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("invalid transform parameters: {0}")]
    Params(String),
}

/// How samples that land outside the source image are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    Nearest,
    Reflect,
    Constant(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotate_deg: f64,
    pub width_shift: f64,
    pub height_shift: f64,
    pub shear_deg: f64,
    pub zoom: f64,
    pub horizontal_flip: bool,
    pub fill_mode: FillMode,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_deg: 20.0,
            width_shift: 0.10,
            height_shift: 0.10,
            shear_deg: 15.0,
            zoom: 0.15,
            horizontal_flip: true,
            fill_mode: FillMode::Nearest,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A config whose every draw is the neutral transform.
    pub fn disabled() -> Self {
        Self {
            rotate_deg: 0.0,
            width_shift: 0.0,
            height_shift: 0.0,
            shear_deg: 0.0,
            zoom: 0.0,
            horizontal_flip: false,
            fill_mode: FillMode::Nearest,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let check = |ok: bool, what: &str, v: f64| {
            if ok {
                Ok(())
            } else {
                Err(AugmentError::Config(format!("{what} out of range: {v}")))
            }
        };
        check((0.0..=180.0).contains(&self.rotate_deg), "rotate_deg", self.rotate_deg)?;
        check((0.0..1.0).contains(&self.width_shift), "width_shift", self.width_shift)?;
        check((0.0..1.0).contains(&self.height_shift), "height_shift", self.height_shift)?;
        check((0.0..90.0).contains(&self.shear_deg), "shear_deg", self.shear_deg)?;
        check((0.0..1.0).contains(&self.zoom), "zoom", self.zoom)
    }
}

/// One concrete draw of transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// Fraction of the image width.
    pub shift_x: f64,
    /// Fraction of the image height.
    pub shift_y: f64,
    pub shear_deg: f64,
    pub zoom_x: f64,
    pub zoom_y: f64,
    pub flip: bool,
}

impl AffineParams {
    pub fn neutral() -> Self {
        Self { rotation_deg: 0.0, shift_x: 0.0, shift_y: 0.0, shear_deg: 0.0, zoom_x: 1.0, zoom_y: 1.0, flip: false }
    }

    fn validate(&self) -> Result<(), AugmentError> {
        let finite = [self.rotation_deg, self.shift_x, self.shift_y, self.shear_deg, self.zoom_x, self.zoom_y]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(AugmentError::Params("non-finite parameter".into()));
        }
        if self.zoom_x <= 0.0 || self.zoom_y <= 0.0 {
            return Err(AugmentError::Params(format!(
                "zoom factors must be positive: {}, {}",
                self.zoom_x, self.zoom_y
            )));
        }
        if self.shear_deg.abs() >= 90.0 {
            return Err(AugmentError::Params(format!("shear must lie in (-90, 90): {}", self.shear_deg)));
        }
        Ok(())
    }

    /// Inverse of the forward linear part `rotation * shear * zoom`.
    fn inverse_linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let t = self.shear_deg.to_radians().tan();
        // Rotation is counter-clockwise as displayed (y axis points down).
        let rot = [[c, s], [-s, c]];
        let shear = [[1.0, t], [0.0, 1.0]];
        let zoom = [[self.zoom_x, 0.0], [0.0, self.zoom_y]];
        let a = mat_mul(mat_mul(rot, shear), zoom);
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]]
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn fetch(img: &RgbImage, x: isize, y: isize, c: usize, fill: FillMode) -> f64 {
    let (w, h) = (img.width(), img.height());
    let (sx, sy) = match fill {
        FillMode::Nearest => (x.clamp(0, w as isize - 1) as usize, y.clamp(0, h as isize - 1) as usize),
        FillMode::Reflect => (reflect(x, w), reflect(y, h)),
        FillMode::Constant(v) => {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                return v as f64;
            }
            (x as usize, y as usize)
        }
    };
    img.channel(sx, sy, c) as f64
}

/// Warp `img` with the combined transform about its centre, sampling the
/// source bilinearly through the inverse map. The flip is applied last.
pub fn affine_transform(img: &RgbImage, params: &AffineParams, fill: FillMode) -> Result<RgbImage, AugmentError> {
    params.validate()?;
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (params.shift_x * w as f64, params.shift_y * h as f64);
    let inv = params.inverse_linear();
    let out = RgbImage::from_fn(w, h, |x, y| {
        let x = if params.flip { w - 1 - x } else { x };
        let (px, py) = (x as f64 - cx - tx, y as f64 - cy - ty);
        let sx = snap(inv[0][0] * px + inv[0][1] * py + cx);
        let sy = snap(inv[1][0] * px + inv[1][1] * py + cy);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let mut rgb = [0u8; 3];
        for (c, slot) in rgb.iter_mut().enumerate() {
            let p00 = fetch(img, x0, y0, c, fill);
            let v = if fx == 0.0 && fy == 0.0 {
                p00
            } else {
                let p10 = fetch(img, x0 + 1, y0, c, fill);
                let p01 = fetch(img, x0, y0 + 1, c, fill);
                let p11 = fetch(img, x0 + 1, y0 + 1, c, fill);
                let top = p00 + (p10 - p00) * fx;
                let bottom = p01 + (p11 - p01) * fx;
                top + (bottom - top) * fy
            };
            *slot = v.round().clamp(0.0, 255.0) as u8;
        }
        rgb
    });
    Ok(out.expect("dimensions copied from a valid image"))
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    -bound + 2.0 * bound * rng.gen::<f64>()
}

/// Draw transform parameters uniformly from the configured ranges.
pub fn sample_augmentation<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> AffineParams {
    let rotation_deg = symmetric(rng, cfg.rotate_deg);
    let shift_x = symmetric(rng, cfg.width_shift);
    let shift_y = symmetric(rng, cfg.height_shift);
    let shear_deg = symmetric(rng, cfg.shear_deg);
    let zoom_x = 1.0 + symmetric(rng, cfg.zoom);
    let zoom_y = 1.0 + symmetric(rng, cfg.zoom);
    let flip = cfg.horizontal_flip && rng.gen_bool(0.5);
    AffineParams { rotation_deg, shift_x, shift_y, shear_deg, zoom_x, zoom_y, flip }
}

/// Random augmentation of one image from a dedicated stream.
pub fn augment_image(img: &RgbImage, cfg: &AugmentConfig, stream: &[u64]) -> Result<RgbImage, AugmentError> {
    let mut rng = seed::rng(cfg.seed, stream);
    let params = sample_augmentation(cfg, &mut rng);
    affine_transform(img, &params, cfg.fill_mode)
}

/// Every original followed by `copies_per_image` augmented variants of it.
/// Image `i` draws from its own stream derived from `cfg.seed` and `i`.
pub fn expand_dataset(
    images: &[LabeledImage],
    cfg: &AugmentConfig,
    copies_per_image: usize,
) -> Result<Vec<LabeledImage>, AugmentError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(images.len() * (1 + copies_per_image));
    for (i, item) in images.iter().enumerate() {
        out.push(item.clone());
        let mut rng = seed::rng(cfg.seed, &[i as u64]);
        for copy in 0..copies_per_image {
            let params = sample_augmentation(cfg, &mut rng);
            out.push(LabeledImage {
                image: affine_transform(&item.image, &params, cfg.fill_mode)?,
                label: item.label,
                source_path: format!("{}#aug{copy}", item.source_path),
            });
        }
    }
    Ok(out)
}

//! Class schema, on-disk corpus layout, stratified splitting, batching and
//! the procedural corpus generator.
//!
//! A corpus directory holds one subdirectory per class key:
//!
//! ```text
//! <root>/cavity_spot/*.png|*.jpg
//! <root>/healthy/*.png|*.jpg
//! <root>/leaf_blight/*.png|*.jpg
//! <root>/fresh_carrot/*.png|*.jpg
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{decode_image, resize_bilinear, to_input_tensor, ImageError, RgbImage};
use crate::seed;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown class directory '{0}' (expected one of cavity_spot, healthy, leaf_blight, fresh_carrot)")]
    UnknownClass(String),
    #[error("class '{0}' has no samples")]
    EmptyClass(&'static str),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarrotClass {
    CavitySpot,
    Healthy,
    LeafBlight,
    FreshCarrot,
}

impl CarrotClass {
    pub const ALL: [CarrotClass; NUM_CLASSES] =
        [CarrotClass::CavitySpot, CarrotClass::Healthy, CarrotClass::LeafBlight, CarrotClass::FreshCarrot];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn key(self) -> &'static str {
        match self {
            CarrotClass::CavitySpot => "cavity_spot",
            CarrotClass::Healthy => "healthy",
            CarrotClass::LeafBlight => "leaf_blight",
            CarrotClass::FreshCarrot => "fresh_carrot",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            CarrotClass::CavitySpot => "Cavity Spot",
            CarrotClass::Healthy => "Healthy",
            CarrotClass::LeafBlight => "Leaf Blight",
            CarrotClass::FreshCarrot => "Fresh Carrot",
        }
    }

    pub fn keys() -> Vec<String> {
        Self::ALL.iter().map(|c| c.key().to_string()).collect()
    }
}

impl fmt::Display for CarrotClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for CarrotClass {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.iter().copied().find(|c| c.key() == s).ok_or_else(|| DatasetError::UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub label: CarrotClass,
    pub source_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScanReport {
    pub items: Vec<LabeledImage>,
    pub skipped: Vec<SkippedFile>,
    pub warnings: Vec<String>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    Ok(entries)
}

/// Decode and label every PNG/JPEG under the class directories of `root`.
/// Undecodable files are skipped and reported rather than failing the scan.
pub fn scan_dataset(root: &Path) -> Result<ScanReport, DatasetError> {
    let mut report = ScanReport::default();
    let mut class_dirs = Vec::new();
    for path in sorted_entries(root)? {
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        class_dirs.push((name.parse::<CarrotClass>()?, path));
    }
    for (label, dir) in class_dirs {
        for path in sorted_entries(&dir)? {
            if !path.is_file() || !is_image_file(&path) {
                continue;
            }
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            match decode_image(&bytes) {
                Ok(image) => {
                    report.items.push(LabeledImage { image, label, source_path: path.to_string_lossy().into_owned() })
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    report.skipped.push(SkippedFile { path, reason: e.to_string() });
                }
            }
        }
    }
    if !report.skipped.is_empty() {
        report.warnings.push(format!("{} undecodable file(s) skipped", report.skipped.len()));
    }
    if report.items.is_empty() {
        log::warn!("no images found under {}", root.display());
        report.warnings.push(format!("no images found under {}", root.display()));
    }
    Ok(report)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Write items as PNG files in the class-directory layout. File names are
/// `<index>_<source stem>.png`, so the output order is reproducible.
pub fn write_dataset(root: &Path, items: &[LabeledImage]) -> Result<Vec<PathBuf>, DatasetError> {
    for class in CarrotClass::ALL {
        let dir = root.join(class.key());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut written = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let (base, suffix) = match item.source_path.split_once('#') {
            Some((b, s)) => (b, format!("_{}", sanitize(s))),
            None => (item.source_path.as_str(), String::new()),
        };
        let stem = Path::new(base).file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let path = root.join(item.label.key()).join(format!("{i:05}_{}{suffix}.png", sanitize(stem)));
        fs::write(&path, item.image.encode_png()?).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

/// Number of validation samples for a class of `n` items.
pub fn validation_count(n: usize, val_fraction: f64) -> usize {
    let v = (n as f64 * val_fraction + 1e-9).floor() as usize;
    if n >= 2 {
        v.clamp(1, n - 1)
    } else {
        0
    }
}

/// Per-class shuffled split; each class contributes
/// `floor(n_c * val_fraction)` items (at least one when it has two or more).
pub fn split_stratified(
    items: &[LabeledImage],
    val_fraction: f64,
    seed_value: u64,
) -> Result<DatasetSplit, DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::Argument(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for class in CarrotClass::ALL {
        let mut members: Vec<&LabeledImage> = items.iter().filter(|i| i.label == class).collect();
        if members.is_empty() {
            return Err(DatasetError::EmptyClass(class.key()));
        }
        let mut rng = seed::rng(seed_value, &[class.id() as u64]);
        members.shuffle(&mut rng);
        let n_val = validation_count(members.len(), val_fraction);
        validation.extend(members[..n_val].iter().map(|&i| i.clone()));
        train.extend(members[n_val..].iter().map(|&i| i.clone()));
    }
    Ok(DatasetSplit { train, validation, seed: seed_value })
}

pub fn one_hot(labels: &[CarrotClass]) -> Tensor {
    let mut data = vec![0.0; labels.len() * NUM_CLASSES];
    for (row, label) in labels.iter().enumerate() {
        data[row * NUM_CLASSES + label.id()] = 1.0;
    }
    Tensor::from_vec([labels.len().max(1), NUM_CLASSES], data).expect("non-empty label batch")
}

/// Concatenate equally shaped tensors along a new leading batch axis.
pub fn stack(items: &[&Tensor]) -> Tensor {
    let inner = items[0].dims().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        assert_eq!(t.dims(), inner.as_slice(), "stack requires equal shapes");
        data.extend_from_slice(t.data());
    }
    let mut dims = vec![items.len()];
    dims.extend(inner);
    Tensor::from_vec(dims, data).expect("stacked shape")
}

/// Index batches covering `0..n` exactly once; shuffled when a seed is given.
pub fn batch_order(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(s) = shuffle_seed {
        order.shuffle(&mut seed::rng(s, &[]));
    }
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Iterator of `([B, S, S, 3] images, [B, 4] one-hot)` batches. Images are
/// resized to `input_size` and scaled to `[0, 1]`.
pub struct Batches<'a> {
    items: &'a [LabeledImage],
    order: std::vec::IntoIter<Vec<usize>>,
    input_size: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Tensor);

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.order.next()?;
        let tensors: Vec<Tensor> = idx
            .iter()
            .map(|&i| {
                let img = resize_bilinear(&self.items[i].image, self.input_size, self.input_size)
                    .expect("input size validated");
                to_input_tensor(&img, self.input_size).expect("resized to input size")
            })
            .collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let labels: Vec<CarrotClass> = idx.iter().map(|&i| self.items[i].label).collect();
        Some((stack(&refs), one_hot(&labels)))
    }
}

pub fn batches(
    items: &[LabeledImage],
    batch_size: usize,
    shuffle_seed: Option<u64>,
    input_size: usize,
) -> Result<Batches<'_>, DatasetError> {
    if batch_size == 0 || input_size == 0 {
        return Err(DatasetError::Argument("batch size and input size must be >= 1".into()));
    }
    Ok(Batches { items, order: batch_order(items.len(), batch_size, shuffle_seed).into_iter(), input_size })
}

/// Floating-point canvas used by the procedural generator.
struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(size: usize, rng: &mut seed::Rng) -> Self {
        const SOILS: [[f32; 3]; 4] =
            [[104.0, 94.0, 84.0], [96.0, 90.0, 82.0], [112.0, 102.0, 92.0], [90.0, 84.0, 78.0]];
        let base = SOILS[rng.gen_range(0..SOILS.len())];
        let px = (0..size * size)
            .map(|_| {
                let n = rng.gen_range(-7.0..7.0) + rng.gen_range(-5.0..5.0);
                [base[0] + n, base[1] + n, base[2] + n]
            })
            .collect();
        Self { size, px }
    }

    /// Paint every pixel whose centre satisfies `inside`, in normalised
    /// coordinates, with `color` plus per-pixel noise.
    fn paint(&mut self, rng: &mut seed::Rng, color: [f32; 3], noise: f32, inside: impl Fn(f32, f32) -> bool) {
        let s = self.size as f32;
        for y in 0..self.size {
            for x in 0..self.size {
                let (u, v) = ((x as f32 + 0.5) / s, (y as f32 + 0.5) / s);
                if inside(u, v) {
                    let n = rng.gen_range(-noise..=noise);
                    self.px[y * self.size + x] = [color[0] + n, color[1] + n * 0.6, color[2] + n * 0.3];
                }
            }
        }
    }

    fn into_image(self) -> RgbImage {
        let size = self.size;
        let pixels = self.px.iter().flat_map(|p| p.map(|v| v.round().clamp(0.0, 255.0) as u8)).collect();
        RgbImage::new(size, size, pixels).expect("canvas dimensions")
    }
}

fn in_ellipse(u: f32, v: f32, cx: f32, cy: f32, rx: f32, ry: f32, angle: f32) -> bool {
    let (s, c) = angle.sin_cos();
    let (du, dv) = (u - cx, v - cy);
    let a = (du * c + dv * s) / rx;
    let b = (-du * s + dv * c) / ry;
    a * a + b * b <= 1.0
}

fn jitter(rng: &mut seed::Rng, color: [f32; 3], amount: f32) -> [f32; 3] {
    color.map(|c| c + rng.gen_range(-amount..=amount))
}

struct Root {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    angle: f32,
}

fn draw_root(canvas: &mut Canvas, rng: &mut seed::Rng) -> Root {
    let root = Root {
        cx: 0.5 + rng.gen_range(-0.08..0.08),
        cy: 0.5 + rng.gen_range(-0.08..0.08),
        rx: rng.gen_range(0.30..0.38),
        ry: rng.gen_range(0.16..0.22),
        angle: rng.gen_range(-0.6..0.6),
    };
    let color = jitter(rng, [236.0, 100.0, 34.0], 12.0);
    let r = &root;
    canvas.paint(rng, color, 10.0, |u, v| in_ellipse(u, v, r.cx, r.cy, r.rx, r.ry, r.angle));
    root
}

fn draw_healthy(canvas: &mut Canvas, rng: &mut seed::Rng) {
    draw_root(canvas, rng);
}

fn draw_cavity_spot(canvas: &mut Canvas, rng: &mut seed::Rng) {
    let root = draw_root(canvas, rng);
    let spots = rng.gen_range(3..=6);
    for _ in 0..spots {
        let (t, r) = (rng.gen_range(0.0..std::f32::consts::TAU), rng.gen_range(0.0..0.6f32).sqrt());
        let (s, c) = root.angle.sin_cos();
        let (a, b) = (r * t.cos() * root.rx * 0.8, r * t.sin() * root.ry * 0.8);
        let (cx, cy) = (root.cx + a * c - b * s, root.cy + a * s + b * c);
        let radius = rng.gen_range(0.03..0.055);
        let color = jitter(rng, [40.0, 22.0, 12.0], 8.0);
        canvas.paint(rng, color, 6.0, |u, v| (u - cx).powi(2) + (v - cy).powi(2) <= radius * radius);
    }
}

fn draw_leaf_blight(canvas: &mut Canvas, rng: &mut seed::Rng) {
    let (bx, by) = (0.5 + rng.gen_range(-0.1..0.1), 0.85 + rng.gen_range(-0.05..0.05));
    let fronds = rng.gen_range(4..=7);
    let mut centres = Vec::new();
    for i in 0..fronds {
        let spread = (i as f32 + 0.5) / fronds as f32 - 0.5;
        let angle = -std::f32::consts::FRAC_PI_2 + spread * 2.0 + rng.gen_range(-0.15..0.15);
        let len = rng.gen_range(0.28..0.4);
        let (cx, cy) = (bx + angle.cos() * len * 0.5, by + angle.sin() * len * 0.5);
        let width = rng.gen_range(0.035..0.06);
        let color = jitter(rng, [36.0, 150.0, 36.0], 14.0);
        canvas.paint(rng, color, 10.0, |u, v| in_ellipse(u, v, cx, cy, len * 0.5, width, angle));
        centres.push((cx, cy, angle, len));
    }
    let patches = rng.gen_range(3..=6);
    for _ in 0..patches {
        let (cx, cy, angle, len) = centres[rng.gen_range(0..centres.len())];
        let d = rng.gen_range(-0.35..0.35) * len;
        let (px, py) = (cx + angle.cos() * d, cy + angle.sin() * d);
        let radius = rng.gen_range(0.035..0.06);
        let color = jitter(rng, [160.0, 92.0, 30.0], 10.0);
        canvas.paint(rng, color, 8.0, |u, v| (u - px).powi(2) + (v - py).powi(2) <= radius * radius);
    }
}

fn draw_fresh_carrot(canvas: &mut Canvas, rng: &mut seed::Rng) {
    let top_x = 0.5 + rng.gen_range(-0.1..0.1);
    let top_y = rng.gen_range(0.30..0.36);
    let tip_x = top_x + rng.gen_range(-0.12..0.12);
    let tip_y = rng.gen_range(0.88..0.95);
    let half_width = rng.gen_range(0.10..0.14);
    // Leaves first so the root overlaps their base.
    let leaves = rng.gen_range(3..=5);
    for i in 0..leaves {
        let spread = (i as f32 + 0.5) / leaves as f32 - 0.5;
        let angle = -std::f32::consts::FRAC_PI_2 + spread * 1.2 + rng.gen_range(-0.1..0.1);
        let len = rng.gen_range(0.22..0.3);
        let (cx, cy) = (top_x + angle.cos() * len * 0.5, top_y + angle.sin() * len * 0.5);
        let color = jitter(rng, [34.0, 158.0, 40.0], 12.0);
        canvas.paint(rng, color, 10.0, |u, v| in_ellipse(u, v, cx, cy, len * 0.5, 0.025, angle));
    }
    let color = jitter(rng, [240.0, 98.0, 28.0], 10.0);
    canvas.paint(rng, color, 10.0, |u, v| {
        if v < top_y || v > tip_y {
            return false;
        }
        let t = (v - top_y) / (tip_y - top_y);
        let centre = top_x + (tip_x - top_x) * t;
        (u - centre).abs() <= half_width * (1.0 - t).max(0.0).sqrt()
    });
}

/// Procedural stand-in corpus: `per_class` images of each class, square
/// `image_size` pixels, fully determined by `seed`.
pub fn generate_synthetic(
    per_class: usize,
    image_size: usize,
    seed_value: u64,
) -> Result<Vec<LabeledImage>, DatasetError> {
    if per_class == 0 || image_size < 8 {
        return Err(DatasetError::Argument(format!(
            "need per_class >= 1 and image_size >= 8, got {per_class} and {image_size}"
        )));
    }
    let mut out = Vec::with_capacity(per_class * NUM_CLASSES);
    for class in CarrotClass::ALL {
        for i in 0..per_class {
            let mut rng = seed::rng(seed_value, &[class.id() as u64, i as u64]);
            let mut canvas = Canvas::new(image_size, &mut rng);
            match class {
                CarrotClass::CavitySpot => draw_cavity_spot(&mut canvas, &mut rng),
                CarrotClass::Healthy => draw_healthy(&mut canvas, &mut rng),
                CarrotClass::LeafBlight => draw_leaf_blight(&mut canvas, &mut rng),
                CarrotClass::FreshCarrot => draw_fresh_carrot(&mut canvas, &mut rng),
            }
            out.push(LabeledImage {
                image: canvas.into_image(),
                label: class,
                source_path: format!("synthetic/{}/{i:04}.png", class.key()),
            });
        }
    }
    Ok(out)
}

//! Synthetic infrared small-target scenes and the normalized-text dataset
//! format used by the public benchmarks.
//!
//! A scene is a smooth background (linear gradient, multi-octave value noise,
//! or both) with dim Gaussian blobs added at random non-overlapping positions
//! and Gaussian sensor noise on top. On disk a dataset directory holds
//! `images/<stem>.pgm`, `labels/<stem>.txt` (one `class cx cy w h` line per
//! box, normalized to `[0,1]`, six decimals) and `manifest.txt` listing the
//! stems.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detect::Target;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::kv::KvFile;
use crate::tensor::Tensor;

/// A target may cover at most this fraction of the image.
pub const MAX_TARGET_AREA_FRACTION: f64 = 0.005;
/// Upper bound on target contrast against the local background.
pub const MAX_CONTRAST: f64 = 0.15;
const PLACEMENT_RETRIES: usize = 200;
/// Minimum gap between target boxes, in pixels.
const TARGET_GAP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Gradient,
    Clutter,
    Mixed,
}

impl fmt::Display for Background {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Background::Gradient => "gradient",
            Background::Clutter => "clutter",
            Background::Mixed => "mixed",
        })
    }
}

impl FromStr for Background {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gradient" => Ok(Background::Gradient),
            "clutter" => Ok(Background::Clutter),
            "mixed" => Ok(Background::Mixed),
            other => Err(Error::config(format!(
                "unknown background {other:?} (gradient, clutter or mixed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Inclusive range of targets per image.
    pub targets: (usize, usize),
    /// Blob size range in pixels; the blob's sigma is a quarter of its size.
    pub target_size: (f64, f64),
    /// Range of blob peak amplitudes above the background.
    pub intensity: (f64, f64),
    pub background: Background,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            targets: (1, 3),
            target_size: (2.0, 8.0),
            intensity: (0.08, MAX_CONTRAST),
            background: Background::Mixed,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

/// Ground-truth box side for a blob of the given size: the blob's ±3σ
/// extent with σ = size/4, rounded up to whole pixels.
pub fn box_side(size: f64) -> f64 {
    (1.5 * size).ceil()
}

impl SceneConfig {
    /// 128×128 scenes for the fast desk-scale suite.
    pub fn fast() -> Self {
        Self {
            image_size: 128,
            target_size: (3.0, 6.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (tmin, tmax) = self.targets;
        let (smin, smax) = self.target_size;
        let (imin, imax) = self.intensity;
        if self.image_size < 16 {
            return Err(Error::config(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        if tmin > tmax {
            return Err(Error::config(format!("targets range {tmin}..{tmax} is empty")));
        }
        if !(smin > 0.0 && smin <= smax && smax.is_finite()) {
            return Err(Error::config(format!("target_size range {smin}..{smax} is invalid")));
        }
        let side = box_side(smax);
        let frac = side * side / (self.image_size * self.image_size) as f64;
        if frac >= MAX_TARGET_AREA_FRACTION {
            return Err(Error::config(format!(
                "largest target box ({side} px for size {smax}) covers {:.3}% of a {n}x{n} image; small targets must stay below 0.5%",
                frac * 100.0,
                n = self.image_size
            )));
        }
        if !(imin > 0.0 && imin <= imax && imax <= MAX_CONTRAST) {
            return Err(Error::config(format!(
                "intensity range {imin}..{imax} must lie in (0, {MAX_CONTRAST}]"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Scene configuration plus split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub train_count: usize,
    pub val_count: usize,
}

impl DatasetConfig {
    /// 64 train / 16 val images at 128×128.
    pub fn fast() -> Self {
        Self {
            scene: SceneConfig::fast(),
            train_count: 64,
            val_count: 16,
        }
    }

    /// 256 train / 64 val images at 256×256.
    pub fn full() -> Self {
        Self {
            scene: SceneConfig::default(),
            train_count: 256,
            val_count: 64,
        }
    }

    pub const KEYS: [&'static str; 12] = [
        "image_size",
        "targets_min",
        "targets_max",
        "size_min",
        "size_max",
        "intensity_min",
        "intensity_max",
        "background",
        "noise_sigma",
        "seed",
        "train_count",
        "val_count",
    ];

    /// Reads entries over the fast-suite defaults.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(&Self::KEYS)?;
        let mut c = Self::fast();
        let s = &mut c.scene;
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        take!("image_size", s.image_size);
        take!("targets_min", s.targets.0);
        take!("targets_max", s.targets.1);
        take!("size_min", s.target_size.0);
        take!("size_max", s.target_size.1);
        take!("intensity_min", s.intensity.0);
        take!("intensity_max", s.intensity.1);
        take!("background", s.background);
        take!("noise_sigma", s.noise_sigma);
        take!("seed", s.seed);
        take!("train_count", c.train_count);
        take!("val_count", c.val_count);
        c.scene.validate()?;
        Ok(c)
    }

    pub fn to_kv_string(&self) -> String {
        let s = &self.scene;
        crate::kv::render(&[
            ("image_size", s.image_size.to_string()),
            ("targets_min", s.targets.0.to_string()),
            ("targets_max", s.targets.1.to_string()),
            ("size_min", s.target_size.0.to_string()),
            ("size_max", s.target_size.1.to_string()),
            ("intensity_min", s.intensity.0.to_string()),
            ("intensity_max", s.intensity.1.to_string()),
            ("background", s.background.to_string()),
            ("noise_sigma", s.noise_sigma.to_string()),
            ("seed", s.seed.to_string()),
            ("train_count", self.train_count.to_string()),
            ("val_count", self.val_count.to_string()),
        ])
    }
}

/// One grayscale image with its boxes.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[1,H,W]`, values in `[0,1]`.
    pub image: Tensor<f32>,
    pub targets: Vec<Target>,
    /// Per target: blob peak above the local background. Empty for loaded
    /// samples.
    pub contrast: Vec<f64>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Bilinear value noise: a random lattice with `cells` cells per side.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scale = cells as f64 / size as f64;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = (y as f64 + 0.5) * scale;
        let (y0, ty) = (
            (fy.floor() as usize).min(cells - 1),
            fy - fy.floor().min((cells - 1) as f64),
        );
        for x in 0..size {
            let fx = (x as f64 + 0.5) * scale;
            let (x0, tx) = (
                (fx.floor() as usize).min(cells - 1),
                fx - fx.floor().min((cells - 1) as f64),
            );
            // smoothstep interpolation weights
            let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
            let v = |i: usize, j: usize| lattice[j * n + i];
            let top = v(x0, y0) * (1.0 - sx) + v(x0 + 1, y0) * sx;
            let bottom = v(x0, y0 + 1) * (1.0 - sx) + v(x0 + 1, y0 + 1) * sx;
            out[y * size + x] = top * (1.0 - sy) + bottom * sy;
        }
    }
    out
}

fn background(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Vec<f64> {
    let size = cfg.image_size;
    let base = rng.random_range(0.25..0.45);
    let mut bg = vec![base; size * size];
    if matches!(cfg.background, Background::Gradient | Background::Mixed) {
        let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
        for y in 0..size {
            for x in 0..size {
                bg[y * size + x] += gx * (x as f64 / size as f64 - 0.5) + gy * (y as f64 / size as f64 - 0.5);
            }
        }
    }
    if matches!(cfg.background, Background::Clutter | Background::Mixed) {
        let mut amp = 0.08;
        for cells in [4, 8, 16] {
            let layer = value_noise(rng, size, cells.min(size / 2));
            bg.iter_mut().zip(&layer).for_each(|(b, v)| *b += amp * v);
            amp *= 0.5;
        }
    }
    bg
}

fn overlaps(a: &BBox, b: &BBox, gap: f64) -> bool {
    (a.cx - b.cx).abs() < (a.w + b.w) / 2.0 + gap && (a.cy - b.cy).abs() < (a.h + b.h) / 2.0 + gap
}

/// Generates scene `index` of the dataset described by `cfg`. The result
/// depends only on `(cfg, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let size = cfg.image_size;
    let mut pixels = background(&mut rng, cfg);

    let count = rng.random_range(cfg.targets.0..=cfg.targets.1);
    let mut targets: Vec<Target> = Vec::with_capacity(count);
    let mut contrast = Vec::with_capacity(count);
    let mut blob_layer = vec![0.0f64; size * size];
    for _ in 0..count {
        let blob_size = rng.random_range(cfg.target_size.0..=cfg.target_size.1);
        let side = box_side(blob_size);
        let amplitude = rng.random_range(cfg.intensity.0..=cfg.intensity.1);
        let half = side / 2.0;
        let placed = (0..PLACEMENT_RETRIES).find_map(|_| {
            let cx = rng.random_range(half..size as f64 - half);
            let cy = rng.random_range(half..size as f64 - half);
            let b = BBox::new(cx, cy, side, side);
            (!targets.iter().any(|t| overlaps(&t.bbox, &b, TARGET_GAP))).then_some(b)
        });
        let Some(bbox) = placed else {
            return Err(Error::Generation(format!(
                "could not place {count} non-overlapping targets in a {size}x{size} image after {PLACEMENT_RETRIES} attempts"
            )));
        };
        let sigma = blob_size / 4.0;
        let (x0, y0, x1, y1) = bbox.corners();
        let mut peak = 0.0f64;
        for y in (y0.floor().max(0.0) as usize)..(y1.ceil() as usize).min(size) {
            for x in (x0.floor().max(0.0) as usize)..(x1.ceil() as usize).min(size) {
                let (dx, dy) = (x as f64 + 0.5 - bbox.cx, y as f64 + 0.5 - bbox.cy);
                let v = amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                blob_layer[y * size + x] += v;
                peak = peak.max(blob_layer[y * size + x]);
            }
        }
        targets.push(Target { bbox, class_id: 0 });
        contrast.push(peak);
    }

    let noise =
        Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Generation(e.to_string()))?;
    for (p, b) in pixels.iter_mut().zip(&blob_layer) {
        let n = if cfg.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        *p = (*p + b + n).clamp(0.0, 1.0);
    }
    let image = Tensor::new(&[1, size, size], pixels.into_iter().map(|v| v as f32).collect())?;
    Ok(Sample {
        image,
        targets,
        contrast,
    })
}

/// Scenes `first..first+count`.
pub fn generate_split(cfg: &SceneConfig, first: u64, count: usize) -> Result<Vec<Sample>> {
    (0..count as u64).map(|i| generate_scene(cfg, first + i)).collect()
}

/// Train and validation splits; validation scenes continue the index range.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = generate_split(&cfg.scene, 0, cfg.train_count)?;
    let val = generate_split(&cfg.scene, cfg.train_count as u64, cfg.val_count)?;
    Ok((train, val))
}

fn stem(index: usize) -> String {
    format!("{index:06}")
}

/// Writes samples as a dataset directory.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = stem(i);
        let (h, w) = (s.height(), s.width());
        let bytes: Vec<u8> = s
            .image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .ok_or_else(|| Error::Internal("image buffer size".into()))?;
        let path = images.join(format!("{name}.pgm"));
        img.save_with_format(&path, image::ImageFormat::Pnm)?;
        let path = labels.join(format!("{name}.txt"));
        fs::write(&path, format_labels(&s.targets, w, h)).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Label lines `class cx cy w h`, normalized, six decimals.
pub fn format_labels(targets: &[Target], width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    targets
        .iter()
        .map(|t| {
            format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                t.class_id,
                t.bbox.cx / w,
                t.bbox.cy / h,
                t.bbox.w / w,
                t.bbox.h / h
            )
        })
        .collect()
}

/// Tolerance for boxes touching the image border after 6-decimal rounding.
const BOUNDS_EPS: f64 = 1e-6;

/// Parses a label file body for an image of the given size.
pub fn parse_labels(text: &str, path: &Path, width: usize, height: usize) -> Result<Vec<Target>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_err(format!(
                "expected `class cx cy w h`, got {} fields",
                fields.len()
            )));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad class id {:?}", fields[0])))?;
        let mut v = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|_| parse_err(format!("bad number {f:?}")))?;
            if !v[k].is_finite() {
                return Err(parse_err(format!("non-finite number {f:?}")));
            }
        }
        let [cx, cy, w, h] = v;
        let inside = w >= 0.0
            && h >= 0.0
            && cx - w / 2.0 >= -BOUNDS_EPS
            && cy - h / 2.0 >= -BOUNDS_EPS
            && cx + w / 2.0 <= 1.0 + BOUNDS_EPS
            && cy + h / 2.0 <= 1.0 + BOUNDS_EPS;
        if !inside {
            return Err(Error::Validation(format!(
                "{}:{}: box ({cx}, {cy}, {w}, {h}) extends outside the normalized [0,1] image",
                path.display(),
                i + 1
            )));
        }
        let (fw, fh) = (width as f64, height as f64);
        out.push(Target {
            bbox: BBox::new(cx * fw, cy * fh, w * fw, h * fh),
            class_id,
        });
    }
    Ok(out)
}

const IMAGE_EXTENSIONS: [&str; 5] = ["pgm", "pnm", "png", "ppm", "pbm"];

/// Loads every image in `image_dir` (sorted by file name) with its
/// same-stem label file from `label_dir`.
pub fn load_yolo_dataset(image_dir: &Path, label_dir: &Path) -> Result<Vec<Sample>> {
    let entries = fs::read_dir(image_dir).map_err(|e| Error::io(image_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let img = image::open(p)?.to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            let image = Tensor::new(&[1, h, w], data)?;
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let label_path = label_dir.join(format!("{stem}.txt"));
            let text = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
            let targets = parse_labels(&text, &label_path, w, h)?;
            Ok(Sample {
                image,
                targets,
                contrast: Vec::new(),
            })
        })
        .collect()
}

/// Loads `<dir>/images` with `<dir>/labels`.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<Sample>> {
    load_yolo_dataset(&dir.join("images"), &dir.join("labels"))
}

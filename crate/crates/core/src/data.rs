//! Segmentation samples, the synthetic shapes dataset, and dataset
//! directories on disk.
//!
//! A dataset directory holds `images/` and `masks/` with matching file stems
//! (`.png` or `.fctt`) plus a `dataset.json` naming the class count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FctError, Result};
use crate::fctt;
use crate::tensor::Tensor;

/// One image with its class-index mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    /// `[H, W, C]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major `H·W` class indices.
    pub mask: Vec<u16>,
}

impl SegmentationSample {
    pub fn new(image: Tensor<f32>, mask: Vec<u16>) -> Result<Self> {
        if image.ndim() != 3 {
            return Err(FctError::shape(format!("sample image must be [H,W,C], got {:?}", image.shape())));
        }
        let (h, w) = (image.shape()[0], image.shape()[1]);
        if mask.len() != h * w {
            return Err(FctError::shape(format!(
                "mask has {} labels for a {h}×{w} image",
                mask.len()
            )));
        }
        Ok(SegmentationSample { image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn max_label(&self) -> u16 {
        self.mask.iter().copied().max().unwrap_or(0)
    }
}

/// Stacks samples into an `[N,H,W,C]` batch plus concatenated masks.
pub fn collate(samples: &[&SegmentationSample]) -> Result<(Tensor<f32>, Vec<u16>)> {
    let first = samples
        .first()
        .ok_or_else(|| FctError::invalid("cannot collate an empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut mask = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(FctError::shape(format!(
                "batch mixes image shapes {shape:?} and {:?}",
                s.image.shape()
            )));
        }
        data.extend_from_slice(s.image.data());
        mask.extend_from_slice(&s.mask);
    }
    let mut bshape = vec![samples.len()];
    bshape.extend(shape);
    Ok((Tensor::new(bshape, data)?, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    /// File stem of each sample, used for naming on disk.
    pub names: Vec<String>,
    pub samples: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<SegmentationSample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

// ----- synthetic shapes ---------------------------------------------------

pub const SYNTH_NOISE_SIGMA: f64 = 0.05;
/// Every foreground class appears in at least this fraction of samples.
pub const SYNTH_MIN_PRESENCE: f64 = 0.3;
const SYNTH_INCLUDE_P: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Ring,
    Rectangle,
}

impl ShapeKind {
    /// Shape drawn for foreground class `c` (1-based).
    pub fn for_class(c: usize) -> Self {
        [ShapeKind::Disk, ShapeKind::Ring, ShapeKind::Rectangle][(c - 1) % 3]
    }
}

/// Mean intensity used for class `c`; background is 0.
pub fn class_intensity(c: usize, classes: usize) -> f32 {
    if c == 0 {
        0.0
    } else {
        0.25 + 0.7 * (c as f32 / (classes - 1) as f32)
    }
}

fn class_sets(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut s: Vec<usize> = (1..classes).filter(|_| rng.random_bool(SYNTH_INCLUDE_P)).collect();
            if s.is_empty() {
                s.push(rng.random_range(1..classes));
            }
            s
        })
        .collect();
    let need = (SYNTH_MIN_PRESENCE * n as f64).ceil() as usize;
    for c in 1..classes {
        let mut have = sets.iter().filter(|s| s.contains(&c)).count();
        for s in sets.iter_mut() {
            if have >= need {
                break;
            }
            if !s.contains(&c) {
                s.push(c);
                s.sort_unstable();
                have += 1;
            }
        }
    }
    sets
}

struct Placed {
    cy: f64,
    cx: f64,
    r: f64,
}

fn render(size: usize, classes: usize, present: &[usize], rng: &mut ChaCha8Rng) -> SegmentationSample {
    let s = size as f64;
    let mut placed: Vec<Placed> = Vec::new();
    let mut mask = vec![0u16; size * size];
    for &c in present {
        let mut r = s * rng.random_range(0.12..0.2);
        let mut spot = None;
        for attempt in 0..200 {
            if attempt % 50 == 49 {
                r *= 0.8;
            }
            let cy = rng.random_range(r + 1.0..s - r - 1.0);
            let cx = rng.random_range(r + 1.0..s - r - 1.0);
            if placed.iter().all(|p| ((p.cy - cy).powi(2) + (p.cx - cx).powi(2)).sqrt() > p.r + r + 2.0) {
                spot = Some((cy, cx));
                break;
            }
        }
        let Some((cy, cx)) = spot else { continue };
        let kind = ShapeKind::for_class(c);
        let (hy, hx) = (r * rng.random_range(0.6..1.0), r * rng.random_range(0.6..1.0));
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let d = (dy * dy + dx * dx).sqrt();
                let inside = match kind {
                    ShapeKind::Disk => d <= r,
                    ShapeKind::Ring => d <= r && d >= 0.5 * r,
                    ShapeKind::Rectangle => dy.abs() <= hy && dx.abs() <= hx,
                };
                if inside {
                    mask[y * size + x] = c as u16;
                }
            }
        }
        placed.push(Placed { cy, cx, r });
    }
    let noise = Normal::new(0.0, SYNTH_NOISE_SIGMA).expect("valid sigma");
    let image: Vec<f32> = mask
        .iter()
        .map(|&m| (class_intensity(m as usize, classes) as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    SegmentationSample {
        image: Tensor::new(vec![size, size, 1], image).expect("sizes agree"),
        mask,
    }
}

/// Grayscale images of non-overlapping disks, rings and rectangles, one
/// shape per present foreground class, with Gaussian noise. Deterministic
/// in `seed`.
pub fn synth_dataset(n: usize, size: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if size == 0 || size % 16 != 0 {
        return Err(FctError::invalid(format!("synthetic size {size} must be a positive multiple of 16")));
    }
    if classes < 2 {
        return Err(FctError::invalid("synthetic data needs at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets = class_sets(n, classes, &mut rng);
    let samples = sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64 + 1);
            // redraw until every planned shape found room
            loop {
                let s = render(size, classes, set, &mut r);
                if set.iter().all(|&c| s.mask.contains(&(c as u16))) {
                    break s;
                }
            }
        })
        .collect();
    Ok(Dataset {
        num_classes: classes,
        names: (0..n).map(|i| format!("{i:05}")).collect(),
        samples,
    })
}

// ----- splits -------------------------------------------------------------

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.1, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = FctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(FctError::invalid(format!("unknown split `{s}` (train|val|test)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle of `0..n`, cut by `ratios` (train, val; test takes the
    /// remainder).
    pub fn new(n: usize, ratios: [f64; 3], seed: u64) -> Result<Self> {
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(FctError::invalid(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (ratios[0] * n as f64).round() as usize;
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok(Split { train: idx, val, test })
    }

    pub fn get(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

// ----- on-disk datasets ---------------------------------------------------

pub const DATASET_JSON: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetJson {
    pub num_classes: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
}

fn default_split() -> [f64; 3] {
    DEFAULT_SPLIT
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub num_classes: usize,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Png,
    Fctt,
}

impl std::str::FromStr for FileFormat {
    type Err = FctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(FileFormat::Png),
            "fctt" => Ok(FileFormat::Fctt),
            _ => Err(FctError::invalid(format!("unknown format `{s}` (png|fctt)"))),
        }
    }
}

impl FileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FileFormat::Png => "png",
            FileFormat::Fctt => "fctt",
        }
    }
}

/// Writes `images/`, `masks/` and `dataset.json` under `dir`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>, format: FileFormat, split: [f64; 3], split_seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for (name, s) in ds.names.iter().zip(&ds.samples) {
        let file = format!("{name}.{}", format.extension());
        write_image(&dir.join("images").join(&file), &s.image, format)?;
        write_mask(&dir.join("masks").join(&file), &s.mask, s.height(), s.width(), format)?;
    }
    let meta = DatasetJson {
        num_classes: ds.num_classes,
        split,
        split_seed,
    };
    fs::write(dir.join(DATASET_JSON), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn write_image(path: &Path, image: &Tensor<f32>, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Fctt => fctt::write(path, image),
        FileFormat::Png => {
            let [h, w, c] = <[usize; 3]>::try_from(image.shape())
                .map_err(|_| FctError::shape("PNG export wants [H,W,C]"))?;
            let px: Vec<u16> = image
                .data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            let img = match c {
                1 => DynamicImage::ImageLuma16(ImageBuffer::from_raw(w as u32, h as u32, px).unwrap()),
                3 => DynamicImage::ImageRgb16(ImageBuffer::from_raw(w as u32, h as u32, px).unwrap()),
                _ => return Err(FctError::shape(format!("PNG export supports 1 or 3 channels, got {c}"))),
            };
            img.save(path)?;
            Ok(())
        }
    }
}

pub fn write_mask(path: &Path, mask: &[u16], h: usize, w: usize, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Fctt => fctt::write(path, &Tensor::new(vec![h, w], mask.iter().map(|&m| m as f32).collect())?),
        FileFormat::Png => {
            if mask.iter().all(|&m| m <= u8::MAX as u16) {
                let px: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
                ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, px).unwrap().save(path)?;
            } else {
                ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, mask.to_vec())
                    .unwrap()
                    .save(path)?;
            }
            Ok(())
        }
    }
}

fn is_data_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "fctt"))
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| FctError::data(dir, e.to_string()))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry?.path();
        if !is_data_file(&path) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem, path.clone()) {
            return Err(FctError::data(&path, format!("duplicate stem (also {})", prev.display())));
        }
    }
    Ok(out)
}

/// Scans `dir` and pairs images with masks; does not decode any pixels.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = dir.as_ref().to_path_buf();
    let meta_path = root.join(DATASET_JSON);
    let text = fs::read_to_string(&meta_path).map_err(|e| FctError::data(&meta_path, e.to_string()))?;
    let meta: DatasetJson = serde_json::from_str(&text).map_err(|e| FctError::data(&meta_path, e.to_string()))?;
    if meta.num_classes < 2 {
        return Err(FctError::data(&meta_path, "num_classes must be at least 2"));
    }
    let images = stems(&root.join("images"))?;
    let mut masks = stems(&root.join("masks"))?;
    let mut entries = Vec::with_capacity(images.len());
    for (stem, image) in images {
        let mask = masks
            .remove(&stem)
            .ok_or_else(|| FctError::data(&image, "image has no matching mask"))?;
        entries.push(DatasetEntry { stem, image, mask });
    }
    if let Some((_, orphan)) = masks.into_iter().next() {
        return Err(FctError::data(orphan, "mask has no matching image"));
    }
    let split = Split::new(entries.len(), meta.split, meta.split_seed).map_err(|e| FctError::data(&meta_path, e.to_string()))?;
    Ok(DatasetManifest {
        root,
        entries,
        num_classes: meta.num_classes,
        split,
    })
}

/// Loads every sample, resizing to `size` when given (bilinear image,
/// nearest mask).
pub fn load_dataset(dir: impl AsRef<Path>, size: Option<[usize; 2]>) -> Result<(DatasetManifest, Dataset)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let image = read_image(&e.image)?;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let mask = read_mask(&e.mask, manifest.num_classes)?;
        if mask.1 != [h, w] {
            return Err(FctError::data(
                &e.mask,
                format!("mask is {:?} but image is {:?}", mask.1, [h, w]),
            ));
        }
        let mut s = SegmentationSample::new(image, mask.0)?;
        if let Some(size) = size {
            s = resize_sample(&s, size);
        }
        samples.push(s);
    }
    let ds = Dataset {
        num_classes: manifest.num_classes,
        names: manifest.entries.iter().map(|e| e.stem.clone()).collect(),
        samples,
    };
    Ok((manifest, ds))
}

/// Reads a PNG (8/16-bit gray or RGB, scaled to `[0,1]`) or an `[H,W,C]` /
/// `[H,W]` `.fctt` tensor.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let fail = |msg: String| FctError::data(path, msg);
    if path.extension().and_then(|e| e.to_str()) == Some("fctt") {
        let t = fctt::read(path).map_err(|e| fail(e.to_string()))?;
        return match t.ndim() {
            2 => Ok(t.reshape(vec![t.shape()[0], t.shape()[1], 1])?),
            3 => Ok(t),
            _ => Err(fail(format!("image tensor must be [H,W] or [H,W,C], got {:?}", t.shape()))),
        };
    }
    let img = image::open(path).map_err(|e| fail(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect()),
        other => return Err(fail(format!("unsupported PNG color type {:?}", other.color()))),
    };
    Tensor::new(vec![h, w, c], data)
}

/// Reads integer labels, rejecting any value `≥ num_classes`.
pub fn read_mask(path: &Path, num_classes: usize) -> Result<(Vec<u16>, [usize; 2])> {
    let fail = |msg: String| FctError::data(path, msg);
    let (labels, dims): (Vec<u32>, [usize; 2]) = if path.extension().and_then(|e| e.to_str()) == Some("fctt") {
        let t = fctt::read(path).map_err(|e| fail(e.to_string()))?;
        if t.ndim() != 2 {
            return Err(fail(format!("mask tensor must be [H,W], got {:?}", t.shape())));
        }
        let mut out = Vec::with_capacity(t.numel());
        for &v in t.data() {
            if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f32 {
                return Err(fail(format!("mask value {v} is not a class index")));
            }
            out.push(v as u32);
        }
        (out, [t.shape()[0], t.shape()[1]])
    } else {
        let img = image::open(path).map_err(|e| fail(e.to_string()))?;
        let dims = [img.height() as usize, img.width() as usize];
        let labels = match img {
            DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
            DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
            other => return Err(fail(format!("mask PNG must be grayscale, got {:?}", other.color()))),
        };
        (labels, dims)
    };
    if let Some(&bad) = labels.iter().find(|&&v| v as usize >= num_classes) {
        return Err(fail(format!("mask label {bad} is not below num_classes {num_classes}")));
    }
    Ok((labels.into_iter().map(|v| v as u16).collect(), dims))
}

/// Bilinear resize of an `[H,W,C]` image, sampling at pixel centers.
pub fn resize_image(img: &Tensor<f32>, [oh, ow]: [usize; 2]) -> Tensor<f32> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if (h, w) == (oh, ow) {
        return img.clone();
    }
    let src = img.data();
    let mut out = vec![0.0f32; oh * ow * c];
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let v = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1));
                out[(y * ow + x) * c + ch] = v as f32;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out).expect("sizes agree")
}

/// Nearest-neighbor resize of a class map.
pub fn resize_mask(mask: &[u16], [h, w]: [usize; 2], [oh, ow]: [usize; 2]) -> Vec<u16> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for x in 0..ow {
            let sx = (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            out.push(mask[sy * w + sx]);
        }
    }
    out
}

pub fn resize_sample(s: &SegmentationSample, size: [usize; 2]) -> SegmentationSample {
    SegmentationSample {
        image: resize_image(&s.image, size),
        mask: resize_mask(&s.mask, [s.height(), s.width()], size),
    }
}

//! Random affine + flip augmentation applied identically to image and mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegmentationSample;
use crate::error::{FctError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation is drawn from `[0, rotation_deg_max)` degrees.
    pub rotation_deg_max: f64,
    /// Zoom factor is drawn from `1 ± zoom_max`.
    pub zoom_max: f64,
    pub shear_max: f64,
    /// Shift per axis, as a fraction of the image side.
    pub shift_max: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg_max: 360.0,
            zoom_max: 0.2,
            shear_max: 0.1,
            shift_max: 0.3,
            hflip: true,
            vflip: true,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn none() -> Self {
        AugmentConfig {
            rotation_deg_max: 0.0,
            zoom_max: 0.0,
            shear_max: 0.0,
            shift_max: 0.0,
            hflip: false,
            vflip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.rotation_deg_max, self.zoom_max, self.shear_max, self.shift_max];
        if ranges.iter().any(|r| !r.is_finite() || *r < 0.0) || self.zoom_max >= 1.0 {
            return Err(FctError::config(format!(
                "augmentation ranges must be finite and nonnegative (zoom below 1), got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentConfig::none()
    }
}

/// Forward map `p ↦ A·(p − c) + c + t` in (row, col) pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            a: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    /// Rotation by `deg` (counter-clockwise on screen), then zoom, shear and
    /// shift, with flips folded in.
    pub fn compose(deg: f64, zoom: f64, shear: f64, shift: [f64; 2], flip: [bool; 2]) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        // (row, col): rotation on screen with rows pointing down
        let rot = [[c, -s], [s, c]];
        let zs = [[zoom, zoom * shear], [0.0, zoom]];
        let mut a = mul(rot, zs);
        for (axis, &f) in flip.iter().enumerate() {
            if f {
                a[axis] = [-a[axis][0], -a[axis][1]];
            }
        }
        Affine { a, t: shift }
    }

    fn inverse(&self) -> [[f64; 2]; 2] {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        [[d / det, -b / det], [-c / det, a / det]]
    }
}

fn mul(x: [[f64; 2]; 2], y: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
        }
    }
    out
}

/// Draws one transform within `cfg`.
pub fn sample_affine(cfg: &AugmentConfig, size: [usize; 2], rng: &mut impl Rng) -> Affine {
    let deg = if cfg.rotation_deg_max > 0.0 {
        rng.random_range(0.0..cfg.rotation_deg_max)
    } else {
        0.0
    };
    let mut draw = |range: f64| if range > 0.0 { rng.random_range(-range..range) } else { 0.0 };
    let zoom = 1.0 + draw(cfg.zoom_max);
    let shear = draw(cfg.shear_max);
    let shift = [draw(cfg.shift_max) * size[0] as f64, draw(cfg.shift_max) * size[1] as f64];
    let flip = [cfg.vflip && rng.random_bool(0.5), cfg.hflip && rng.random_bool(0.5)];
    Affine::compose(deg, zoom, shear, shift, flip)
}

/// Resamples `sample` through `tf`: bilinear for the image, nearest for the
/// mask; pixels mapped from outside become 0 / background.
pub fn apply_affine(sample: &SegmentationSample, tf: &Affine) -> SegmentationSample {
    if *tf == Affine::identity() {
        return sample.clone();
    }
    let (h, w, ch) = (sample.height(), sample.width(), sample.channels());
    let inv = tf.inverse();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = sample.image.data();
    let mut img = vec![0.0f32; h * w * ch];
    let mut mask = vec![0u16; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 - cy - tf.t[0], x as f64 - cx - tf.t[1]);
            let sy = inv[0][0] * py + inv[0][1] * px + cy;
            let sx = inv[1][0] * py + inv[1][1] * px + cx;
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                mask[y * w + x] = sample.mask[ny as usize * w + nx as usize];
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (ty, tx) = (sy - y0, sx - x0);
            for c in 0..ch {
                let at = |yy: f64, xx: f64| {
                    if yy < 0.0 || xx < 0.0 || yy as usize >= h || xx as usize >= w {
                        0.0
                    } else {
                        src[(yy as usize * w + xx as usize) * ch + c] as f64
                    }
                };
                let v = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1.0))
                    + ty * ((1.0 - tx) * at(y0 + 1.0, x0) + tx * at(y0 + 1.0, x0 + 1.0));
                img[(y * w + x) * ch + c] = v as f32;
            }
        }
    }
    SegmentationSample {
        image: Tensor::new(vec![h, w, ch], img).expect("sizes agree"),
        mask,
    }
}

pub fn augment(sample: &SegmentationSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SegmentationSample {
    if cfg.is_identity() {
        return sample.clone();
    }
    let tf = sample_affine(cfg, [sample.height(), sample.width()], rng);
    apply_affine(sample, &tf)
}

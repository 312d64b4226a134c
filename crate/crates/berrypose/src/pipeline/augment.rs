//! Keypoint-space data augmentation.
//!
//! All geometric augmentation composes into one affine pixel map
//! `u' = s_x * u + o_x` (per axis; a horizontal flip is `s_x < 0`), applied
//! identically to the image and to keypoint supervision. Because the
//! network is supervised purely on projected keypoints and sizes, poses are
//! never re-annotated; they are only ever recovered by PnP at inference
//! time. Color jitter perturbs appearance and never touches geometry.

use berrypose_core::geometry::CameraIntrinsics;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub scale: bool,
    pub crop: bool,
    pub color_jitter: bool,
    /// Maximum zoom-in factor for scale/crop.
    pub max_zoom: f64,
    pub brightness: f64,
    pub saturation: f64,
    pub hue_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            scale: true,
            crop: true,
            color_jitter: true,
            max_zoom: 1.2,
            brightness: 0.2,
            saturation: 0.3,
            hue_deg: 15.0,
        }
    }
}

impl AugmentConfig {
    pub const OFF: AugmentConfig = AugmentConfig {
        flip: false,
        scale: false,
        crop: false,
        color_jitter: false,
        max_zoom: 1.0,
        brightness: 0.0,
        saturation: 0.0,
        hue_deg: 0.0,
    };
}

/// Axis-separable affine map on pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelAffine {
    pub sx: f64,
    pub sy: f64,
    pub ox: f64,
    pub oy: f64,
}

impl PixelAffine {
    pub const IDENTITY: PixelAffine = PixelAffine { sx: 1.0, sy: 1.0, ox: 0.0, oy: 0.0 };

    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        (self.sx * u + self.ox, self.sy * v + self.oy)
    }

    pub fn invert(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.ox) / self.sx, (v - self.oy) / self.sy)
    }

    /// `self.compose(inner)` applies `inner` first.
    pub fn compose(&self, inner: &PixelAffine) -> PixelAffine {
        PixelAffine {
            sx: self.sx * inner.sx,
            sy: self.sy * inner.sy,
            ox: self.sx * inner.ox + self.ox,
            oy: self.sy * inner.oy + self.oy,
        }
    }

    /// Horizontal mirror on the integer-centered pixel lattice.
    pub fn flip_x(width: u32) -> PixelAffine {
        PixelAffine { sx: -1.0, sy: 1.0, ox: (width - 1) as f64, oy: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedImage {
    pub image: Array3<f32>,
    pub affine: PixelAffine,
    /// Indices of input instances whose (transformed) center stayed inside
    /// the image.
    pub kept: Vec<usize>,
    /// Intrinsics rescaled for the zoom/crop part; `None` when a flip is
    /// present (a mirror has no positive-focal pinhole equivalent).
    pub scaled_intrinsics: Option<CameraIntrinsics>,
}

fn bilinear(image: &Array3<f32>, c: usize, u: f64, v: f64) -> f32 {
    let (_ch, h, w) = image.dim();
    let uc = u.clamp(0.0, (w - 1) as f64);
    let vc = v.clamp(0.0, (h - 1) as f64);
    let x0 = uc.floor() as usize;
    let y0 = vc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (uc - x0 as f64) as f32;
    let fy = (vc - y0 as f64) as f32;
    let a = image[(c, y0, x0)] * (1.0 - fx) + image[(c, y0, x1)] * fx;
    let b = image[(c, y1, x0)] * (1.0 - fx) + image[(c, y1, x1)] * fx;
    a * (1.0 - fy) + b * fy
}

fn resample(image: &Array3<f32>, affine: &PixelAffine) -> Array3<f32> {
    let (ch, h, w) = image.dim();
    let mut out = Array3::<f32>::zeros((ch, h, w));
    for y in 0..h {
        for x in 0..w {
            let (u, v) = affine.invert(x as f64, y as f64);
            for c in 0..ch {
                out[(c, y, x)] = bilinear(image, c, u, v);
            }
        }
    }
    out
}

fn jitter_colors(image: &mut Array3<f32>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let brightness = 1.0 + rng.random_range(-cfg.brightness..=cfg.brightness) as f32;
    let saturation = 1.0 + rng.random_range(-cfg.saturation..=cfg.saturation) as f32;
    let hue = rng.random_range(-cfg.hue_deg..=cfg.hue_deg).to_radians();
    // hue rotation in the YIQ-ish basis, cheap and invertible
    let (cos_h, sin_h) = (hue.cos() as f32, hue.sin() as f32);
    let (_c, h, w) = image.dim();
    for y in 0..h {
        for x in 0..w {
            let r = image[(0, y, x)];
            let g = image[(1, y, x)];
            let b = image[(2, y, x)];
            let luma = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let i2 = (i * cos_h - q * sin_h) * saturation;
            let q2 = (i * sin_h + q * cos_h) * saturation;
            let r2 = luma + 0.956 * i2 + 0.621 * q2;
            let g2 = luma - 0.272 * i2 - 0.647 * q2;
            let b2 = luma - 1.106 * i2 + 1.703 * q2;
            image[(0, y, x)] = (r2 * brightness).clamp(0.0, 1.0);
            image[(1, y, x)] = (g2 * brightness).clamp(0.0, 1.0);
            image[(2, y, x)] = (b2 * brightness).clamp(0.0, 1.0);
        }
    }
}

/// Draws the geometric part of an augmentation: the composed affine. A crop
/// leaving no instance center inside the frame is redrawn up to 10 times,
/// then geometry falls back to flip-only.
pub fn draw_affine(
    cfg: &AugmentConfig,
    width: u32,
    height: u32,
    centers: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
) -> PixelAffine {
    let flip = cfg.flip && rng.random::<bool>();
    let base = if flip {
        PixelAffine::flip_x(width)
    } else {
        PixelAffine::IDENTITY
    };
    if !cfg.scale && !cfg.crop {
        return base;
    }

    let inside = |a: &PixelAffine, (u, v): (f64, f64)| {
        let (tu, tv) = a.apply(u, v);
        tu >= 0.0 && tu <= (width - 1) as f64 && tv >= 0.0 && tv <= (height - 1) as f64
    };
    for _attempt in 0..10 {
        let s = if cfg.scale {
            rng.random_range(1.0..=cfg.max_zoom.max(1.0))
        } else {
            1.0
        };
        let win_w = width as f64 / s;
        let win_h = height as f64 / s;
        let (left, top) = if cfg.crop {
            (
                rng.random_range(0.0..=(width as f64 - win_w).max(0.0)),
                rng.random_range(0.0..=(height as f64 - win_h).max(0.0)),
            )
        } else {
            ((width as f64 - win_w) / 2.0, (height as f64 - win_h) / 2.0)
        };
        let zoom = PixelAffine {
            sx: s,
            sy: s,
            ox: -left * s,
            oy: -top * s,
        };
        let candidate = zoom.compose(&base);
        if centers.is_empty() || centers.iter().any(|&c| inside(&candidate, c)) {
            return candidate;
        }
    }
    base
}

/// Applies a full augmentation to an image and its instance centers.
pub fn augment_image(
    image: &Array3<f32>,
    centers: &[(f64, f64)],
    intrinsics: &CameraIntrinsics,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> AugmentedImage {
    let (_c, h, w) = image.dim();
    let affine = draw_affine(cfg, w as u32, h as u32, centers, rng);
    let mut out = if affine == PixelAffine::IDENTITY {
        image.clone()
    } else {
        resample(image, &affine)
    };
    if cfg.color_jitter {
        jitter_colors(&mut out, cfg, rng);
    }
    let kept = centers
        .iter()
        .enumerate()
        .filter(|(_, &(u, v))| {
            let (tu, tv) = affine.apply(u, v);
            tu >= 0.0 && tu <= (w - 1) as f64 && tv >= 0.0 && tv <= (h - 1) as f64
        })
        .map(|(i, _)| i)
        .collect();
    let scaled_intrinsics = if affine.sx > 0.0 {
        CameraIntrinsics::new(
            intrinsics.fx * affine.sx,
            intrinsics.fy * affine.sy,
            intrinsics.cx * affine.sx + affine.ox,
            intrinsics.cy * affine.sy + affine.oy,
            w as u32,
            h as u32,
        )
        .ok()
    } else {
        None
    };
    AugmentedImage { image: out, affine, kept, scaled_intrinsics }
}

//! Training-time augmentation: random resize, colour jitter on the layers,
//! random crop, then recompositing.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::{composite, AlphaMatte, Image, Scene};
use crate::error::{DcamError, Result};
use crate::tensor::{bilinear_taps, Taps};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Square output side.
    pub crop: usize,
    pub scale_range: (f64, f64),
    /// Maximum relative change of brightness, contrast and saturation.
    pub jitter: f64,
    pub max_retries: usize,
}

impl AugmentConfig {
    pub fn new(crop: usize) -> Self {
        Self {
            crop,
            scale_range: (0.5, 2.0),
            jitter: 0.2,
            max_retries: 10,
        }
    }
}

/// Multiplicative factors; 1 leaves the image untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ColorJitter {
    pub const NEUTRAL: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    fn sample<R: Rng>(rng: &mut R, j: f64) -> Self {
        let mut f = || if j > 0.0 { rng.random_range(1.0 - j..=1.0 + j) } else { 1.0 };
        Self {
            brightness: f(),
            contrast: f(),
            saturation: f(),
        }
    }

    pub fn apply(&self, img: &mut Image) {
        let luma = |img: &Image, y: usize, x: usize| {
            0.299 * img[[0, y, x]] as f64 + 0.587 * img[[1, y, x]] as f64 + 0.114 * img[[2, y, x]] as f64
        };
        if self.brightness != 1.0 {
            img.mapv_inplace(|v| (v as f64 * self.brightness).clamp(0.0, 1.0) as f32);
        }
        let (_, h, w) = img.dim();
        if self.contrast != 1.0 {
            let mut mean = 0.0;
            for y in 0..h {
                for x in 0..w {
                    mean += luma(img, y, x);
                }
            }
            mean /= (h * w) as f64;
            img.mapv_inplace(|v| ((v as f64 - mean) * self.contrast + mean).clamp(0.0, 1.0) as f32);
        }
        if self.saturation != 1.0 {
            for y in 0..h {
                for x in 0..w {
                    let g = luma(img, y, x);
                    for c in 0..3 {
                        let v = img[[c, y, x]] as f64;
                        img[[c, y, x]] = ((v - g) * self.saturation + g).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
}

/// A fully drawn augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Resized size is `round(side * scale)`.
    pub scale: f64,
    pub fg_jitter: ColorJitter,
    pub bg_jitter: ColorJitter,
    pub crop_y: usize,
    pub crop_x: usize,
}

impl AugmentParams {
    /// Parameters that return the scene unchanged when the crop covers it.
    pub fn neutral() -> Self {
        Self {
            scale: 1.0,
            fg_jitter: ColorJitter::NEUTRAL,
            bg_jitter: ColorJitter::NEUTRAL,
            crop_y: 0,
            crop_x: 0,
        }
    }
}

fn resized_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (((h as f64) * scale).round() as usize, ((w as f64) * scale).round() as usize)
}

fn resample_plane(src: ArrayView2<f32>, ty: &Taps, tx: &Taps) -> Array2<f32> {
    Array2::from_shape_fn((ty.len(), tx.len()), |(y, x)| {
        let mut acc = 0.0f64;
        for &(iy, wy) in &ty[y] {
            for &(ix, wx) in &tx[x] {
                acc += wy * wx * src[[iy, ix]] as f64;
            }
        }
        acc as f32
    })
}

/// Bilinear resize of an alpha plane.
pub fn resize_plane(src: ArrayView2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    resample_plane(src, &bilinear_taps(sh, h), &bilinear_taps(sw, w))
}

/// Applies drawn parameters. Alpha and instance alphas share the geometric
/// transform; foreground and background are jittered, then recomposited.
pub fn apply_augmentation(scene: &Scene, p: &AugmentParams, crop: usize) -> Result<Scene> {
    let (h, w) = (scene.height(), scene.width());
    let (nh, nw) = resized_dims(h, w, p.scale);
    if p.crop_y + crop > nh || p.crop_x + crop > nw {
        return Err(DcamError::Augmentation(format!(
            "crop {crop} at ({}, {}) does not fit the resized {nh}x{nw} scene",
            p.crop_y, p.crop_x
        )));
    }
    let (ty, tx) = (bilinear_taps(h, nh), bilinear_taps(w, nw));
    let window_y = p.crop_y..p.crop_y + crop;
    let window_x = p.crop_x..p.crop_x + crop;
    // Only the taps of rows and columns inside the crop are evaluated.
    let (ty, tx): (Taps, Taps) = (ty[window_y].to_vec(), tx[window_x].to_vec());
    let geo_plane = |a: &AlphaMatte| resample_plane(a.view(), &ty, &tx).mapv(|v| v.clamp(0.0, 1.0));
    let geo_image = |img: &Image| {
        let planes: Vec<Array2<f32>> = img.axis_iter(Axis(0)).map(|pl| resample_plane(pl, &ty, &tx)).collect();
        let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
        ndarray::stack(Axis(0), &views).expect("equal planes").mapv(|v| v.clamp(0.0, 1.0))
    };
    let alpha = geo_plane(&scene.alpha);
    let instance_alphas: Vec<AlphaMatte> = scene.instance_alphas.iter().map(geo_plane).collect();
    let mut foreground = geo_image(&scene.foreground);
    let mut background = geo_image(&scene.background);
    p.fg_jitter.apply(&mut foreground);
    p.bg_jitter.apply(&mut background);
    let comp = composite(&foreground, &background, &alpha)?;
    let mut spec = scene.spec.clone();
    spec.height = crop;
    spec.width = crop;
    Ok(Scene {
        foreground,
        background,
        composite: comp,
        alpha,
        instance_alphas,
        seed: scene.seed,
        spec,
    })
}

/// Draws parameters from `rng` and applies them. A scale too small for the
/// crop is clamped up and redrawn; after `max_retries` failures this errors.
pub fn augment<R: Rng>(scene: &Scene, cfg: &AugmentConfig, rng: &mut R) -> Result<Scene> {
    let (h, w) = (scene.height(), scene.width());
    let (lo, hi) = cfg.scale_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(DcamError::Augmentation(format!("invalid scale range {lo}..{hi}")));
    }
    let mut scale = rng.random_range(lo..=hi);
    for _ in 0..=cfg.max_retries {
        let (nh, nw) = resized_dims(h, w, scale);
        if nh >= cfg.crop && nw >= cfg.crop {
            let params = AugmentParams {
                scale,
                fg_jitter: ColorJitter::sample(rng, cfg.jitter),
                bg_jitter: ColorJitter::sample(rng, cfg.jitter),
                crop_y: rng.random_range(0..=nh - cfg.crop),
                crop_x: rng.random_range(0..=nw - cfg.crop),
            };
            return apply_augmentation(scene, &params, cfg.crop);
        }
        // Smallest scale whose rounded size covers the crop, if still in range.
        let needed = (cfg.crop as f64 - 0.5 + 1e-9) / h.min(w) as f64;
        scale = if needed <= hi { needed.max(lo) } else { rng.random_range(lo..=hi) };
    }
    Err(DcamError::Augmentation(format!(
        "could not fit a {} crop into a {h}x{w} scene within {} retries",
        cfg.crop, cfg.max_retries
    )))
}


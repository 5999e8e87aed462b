//! Image rasters, compositing, synthetic scenes, augmentation and storage.

mod augment;
mod codec;
mod storage;
mod synth;

pub use augment::{apply_augmentation, augment, resize_plane, AugmentConfig, AugmentParams, ColorJitter};
pub use codec::{decode_alpha, decode_image, encode_alpha8, encode_image, load_alpha, load_image, save_alpha, save_image};
pub use storage::{load_dataset, save_dataset, MANIFEST};
pub use synth::{generate_dataset, make_synthetic_scene, scene_seed, Palette, SceneSpec, ShapeFamily};

use ndarray::{Array2, Array3, Zip};

use crate::error::{DcamError, Result};

/// RGB image as `(3, H, W)` with values in `[0, 1]`.
pub type Image = Array3<f32>;
/// Per-pixel opacity as `(H, W)` with values in `[0, 1]`.
pub type AlphaMatte = Array2<f32>;

pub const MIN_SIDE: usize = 32;

/// `alpha * fg + (1 - alpha) * bg`, per channel.
pub fn composite(fg: &Image, bg: &Image, alpha: &AlphaMatte) -> Result<Image> {
    let (c, h, w) = fg.dim();
    if bg.dim() != (c, h, w) || alpha.dim() != (h, w) || c != 3 {
        return Err(DcamError::Contract(format!(
            "composite needs matching (3, H, W) images and (H, W) alpha; got {:?}, {:?}, {:?}",
            fg.dim(),
            bg.dim(),
            alpha.dim()
        )));
    }
    let mut out = Image::zeros((c, h, w));
    for ch in 0..c {
        Zip::from(out.index_axis_mut(ndarray::Axis(0), ch))
            .and(fg.index_axis(ndarray::Axis(0), ch))
            .and(bg.index_axis(ndarray::Axis(0), ch))
            .and(alpha)
            .for_each(|o, &f, &b, &a| {
                let (f64f, f64b, a) = (f as f64, b as f64, a as f64);
                let v = a * f64f + (1.0 - a) * f64b;
                // Rounding may step just outside the segment [b, f].
                *o = (v as f32).clamp(f.min(b), f.max(b));
            });
    }
    Ok(out)
}

/// One matting sample with its layers and per-instance mattes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub foreground: Image,
    pub background: Image,
    pub composite: Image,
    pub alpha: AlphaMatte,
    /// Visible opacity of each instance; they sum to `alpha`.
    pub instance_alphas: Vec<AlphaMatte>,
    pub seed: u64,
    pub spec: SceneSpec,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.alpha.dim().0
    }

    pub fn width(&self) -> usize {
        self.alpha.dim().1
    }

    /// Checks ranges, sizes, the compositing identity within `1/255`, and that
    /// instance mattes never exceed the total.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.alpha.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(DcamError::Contract(format!("scene is {h}x{w}; sides must be at least {MIN_SIDE}")));
        }
        for (name, img) in [("foreground", &self.foreground), ("background", &self.background), ("composite", &self.composite)] {
            if img.dim() != (3, h, w) {
                return Err(DcamError::Contract(format!("{name} has shape {:?}, expected (3, {h}, {w})", img.dim())));
            }
            if img.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
                return Err(DcamError::Contract(format!("{name} has values outside [0, 1]")));
            }
        }
        if self.alpha.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DcamError::Contract("alpha outside [0, 1]".into()));
        }
        let expected = composite(&self.foreground, &self.background, &self.alpha)?;
        let worst = Zip::from(&expected)
            .and(&self.composite)
            .fold(0.0f32, |m, &a, &b| m.max((a - b).abs()));
        if worst > 1.0 / 255.0 + 1e-6 {
            return Err(DcamError::Contract(format!("composite deviates from the layers by {worst}")));
        }
        let mut sum = AlphaMatte::zeros((h, w));
        for inst in &self.instance_alphas {
            if inst.dim() != (h, w) {
                return Err(DcamError::Contract("instance alpha size mismatch".into()));
            }
            sum += inst;
        }
        if Zip::from(&sum).and(&self.alpha).fold(false, |bad, &s, &a| bad || s > a + 1e-3) {
            return Err(DcamError::Contract("instance alphas exceed the total alpha".into()));
        }
        Ok(())
    }
}

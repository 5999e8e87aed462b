//! Trimaps and clicks derived from ground truth, and their rasterisation
//! into the 3-channel guidance map fed to the network.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::Rng;

use crate::config::GuidanceMode;
use crate::dataio::AlphaMatte;
use crate::error::{DcamError, Result};

pub const BACKGROUND: u8 = 0;
pub const UNKNOWN: u8 = 1;
pub const FOREGROUND: u8 = 2;

/// Per-pixel labels: [`BACKGROUND`], [`UNKNOWN`] or [`FOREGROUND`].
pub type Trimap = Array2<u8>;

/// Pixel coordinates as `(x, y)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClickSet {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub enum Payload<'a> {
    None,
    Clicks(&'a ClickSet),
    Trimap(&'a Trimap),
}

/// Mode-tagged `(3, H, W)` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance {
    pub mode: GuidanceMode,
    pub raster: Array3<f32>,
}

const OPAQUE: f32 = 1.0 - 1e-3;
const CLEAR: f32 = 1e-3;

/// Offsets `(dy, dx)` with `dy^2 + dx^2 <= r^2`.
fn disk_offsets(radius: f64) -> Vec<(isize, isize)> {
    let r = radius.max(0.0);
    let reach = r.floor() as isize;
    let mut out = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if ((dy * dy + dx * dx) as f64) <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Labels a pixel foreground when it is opaque and no non-opaque pixel lies
/// within `radius`, background when it is clear and no non-clear pixel lies
/// within `radius`, and unknown otherwise.
pub fn trimap_from_alpha(alpha: &AlphaMatte, radius: f64) -> Trimap {
    let (h, w) = alpha.dim();
    let offsets = disk_offsets(radius);
    let any_within = |y: usize, x: usize, pred: &dyn Fn(f32) -> bool| {
        offsets.iter().any(|&(dy, dx)| {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && pred(alpha[[yy as usize, xx as usize]])
        })
    };
    Trimap::from_shape_fn((h, w), |(y, x)| {
        let a = alpha[[y, x]];
        if a >= OPAQUE && !any_within(y, x, &|v| v < OPAQUE) {
            FOREGROUND
        } else if a <= CLEAR && !any_within(y, x, &|v| v > CLEAR) {
            BACKGROUND
        } else {
            UNKNOWN
        }
    })
}

fn pick<R: Rng>(pool: &[(usize, usize)], n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if pool.is_empty() || n == 0 {
        return Vec::new();
    }
    if pool.len() >= n {
        sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Positive clicks inside the target (`alpha > 0.9`) and negative clicks
/// outside it (`alpha < 0.1`), preferring the interiors of other instances.
pub fn clicks_from_instance<R: Rng>(target: &AlphaMatte, others: &[AlphaMatte], rng: &mut R, n_pos: usize, n_neg: usize) -> Result<ClickSet> {
    if !(1..=5).contains(&n_pos) || n_neg > 3 {
        return Err(DcamError::Guidance(format!("need 1..=5 positive and 0..=3 negative clicks, got {n_pos} and {n_neg}")));
    }
    let (h, w) = target.dim();
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    let mut other_interior = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let a = target[[y, x]];
            if a > 0.9 {
                inside.push((x, y));
            } else if a < 0.1 {
                outside.push((x, y));
                if others.iter().any(|o| o[[y, x]] > 0.9) {
                    other_interior.push((x, y));
                }
            }
        }
    }
    if inside.is_empty() {
        return Err(DcamError::Guidance("target instance has no pixel with alpha above 0.9".into()));
    }
    let positives = pick(&inside, n_pos, rng);
    let negatives = if other_interior.is_empty() {
        pick(&outside, n_neg, rng)
    } else {
        pick(&other_interior, n_neg, rng)
    };
    Ok(ClickSet { positives, negatives })
}

/// `max(3, 1% of the shorter side)`.
pub fn default_click_radius(height: usize, width: usize) -> f64 {
    (0.01 * height.min(width) as f64).max(3.0)
}

fn stamp(plane: &mut ndarray::ArrayViewMut2<f32>, (x, y): (usize, usize), offsets: &[(isize, isize)]) {
    let (h, w) = plane.dim();
    for &(dy, dx) in offsets {
        let (yy, xx) = (y as isize + dy, x as isize + dx);
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            plane[[yy as usize, xx as usize]] = 1.0;
        }
    }
}

/// Rasterises guidance. Clicks become filled disks: positives in channel 0,
/// negatives in channel 2. Trimaps become one-hot background / unknown /
/// foreground channels.
pub fn encode_guidance(mode: GuidanceMode, payload: Payload, height: usize, width: usize, click_radius: f64) -> Result<Guidance> {
    let mut raster = Array3::<f32>::zeros((3, height, width));
    match (mode, payload) {
        (GuidanceMode::None, Payload::None) => {}
        (GuidanceMode::Click, Payload::Clicks(clicks)) => {
            let offsets = disk_offsets(click_radius);
            for (ch, list) in [(0, &clicks.positives), (2, &clicks.negatives)] {
                let mut plane = raster.index_axis_mut(ndarray::Axis(0), ch);
                for &(x, y) in list.iter() {
                    if x >= width || y >= height {
                        return Err(DcamError::Guidance(format!("click ({x}, {y}) lies outside the {width}x{height} image")));
                    }
                    stamp(&mut plane, (x, y), &offsets);
                }
            }
        }
        (GuidanceMode::Trimap, Payload::Trimap(t)) => {
            if t.dim() != (height, width) {
                return Err(DcamError::Guidance(format!("trimap is {:?} but the image is {height}x{width}", t.dim())));
            }
            for ((y, x), &label) in t.indexed_iter() {
                if label > FOREGROUND {
                    return Err(DcamError::Guidance(format!("invalid trimap label {label} at ({x}, {y})")));
                }
                raster[[label as usize, y, x]] = 1.0;
            }
        }
        (mode, _) => {
            return Err(DcamError::Guidance(format!("payload does not match guidance mode {}", mode.as_str())));
        }
    }
    Ok(Guidance { mode, raster })
}

/// Grey value of a label in trimap files.
pub fn label_to_grey(label: u8) -> u8 {
    match label {
        BACKGROUND => 0,
        UNKNOWN => 128,
        _ => 255,
    }
}

/// Nearest of 0 / 128 / 255.
pub fn grey_to_label(v: u8) -> u8 {
    if v < 64 {
        BACKGROUND
    } else if v > 191 {
        FOREGROUND
    } else {
        UNKNOWN
    }
}

pub fn save_trimap(t: &Trimap, path: &Path) -> Result<()> {
    let (h, w) = t.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([label_to_grey(t[[y as usize, x as usize]])]));
    buf.save(path)?;
    Ok(())
}

pub fn load_trimap(path: &Path) -> Result<Trimap> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Trimap::from_shape_fn((h as usize, w as usize), |(y, x)| grey_to_label(img.get_pixel(x as u32, y as u32)[0])))
}

//! Procedural matting scenes: textured soft-edged shapes layered over a
//! textured background.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{composite, AlphaMatte, Image, Scene, MIN_SIDE};
use crate::error::{DcamError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Disk,
    Polygon,
    Blob,
    /// Each instance draws its family at random.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    Vivid,
    Muted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// 1 to 4.
    pub instances: usize,
    pub shape: ShapeFamily,
    pub palette: Palette,
    /// Soft edge width in pixels (at least 2); drawn from `[2, 4]` if unset.
    pub edge_width: Option<f64>,
    /// Instance radius in pixels; drawn from a size-dependent range if unset.
    pub radius: Option<f64>,
    /// Allowed overlap of bounding circles, as a fraction of the smaller radius.
    pub overlap_tolerance: f64,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, instances: usize) -> Self {
        Self {
            height,
            width,
            instances,
            shape: ShapeFamily::Mixed,
            palette: Palette::Vivid,
            edge_width: None,
            radius: None,
            overlap_tolerance: 0.0,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;
const PLACEMENT_SHRINK: f64 = 0.995;
/// Full layouts tried before giving up; each restart shrinks all radii.
const PLACEMENT_LAYOUTS: usize = 20;
const LAYOUT_SHRINK: f64 = 0.9;
const BLOB_HARMONICS: usize = 3;

#[derive(Debug, Clone)]
enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Polygon { verts: Vec<(f64, f64)> },
    Blob { cy: f64, cx: f64, r: f64, harmonics: [(f64, f64); BLOB_HARMONICS] },
}

impl Shape {
    /// Signed distance (positive inside) from pixel centre `(y, x)`.
    fn signed_distance(&self, y: f64, x: f64) -> f64 {
        match self {
            Shape::Disk { cy, cx, r } => r - ((y - cy).powi(2) + (x - cx).powi(2)).sqrt(),
            Shape::Polygon { verts } => {
                let mut dist = f64::INFINITY;
                let mut inside = false;
                for i in 0..verts.len() {
                    let (ay, ax) = verts[i];
                    let (by, bx) = verts[(i + 1) % verts.len()];
                    let (ey, ex) = (by - ay, bx - ax);
                    let t = (((y - ay) * ey + (x - ax) * ex) / (ey * ey + ex * ex)).clamp(0.0, 1.0);
                    dist = dist.min(((y - ay - t * ey).powi(2) + (x - ax - t * ex).powi(2)).sqrt());
                    if (ay > y) != (by > y) && x < ax + (y - ay) * ex / ey {
                        inside = !inside;
                    }
                }
                if inside {
                    dist
                } else {
                    -dist
                }
            }
            Shape::Blob { cy, cx, r, harmonics } => {
                let (dy, dx) = (y - cy, x - cx);
                let theta = dy.atan2(dx);
                let radius = r * (1.0 + harmonics.iter().enumerate().map(|(k, (a, p))| a * ((k + 2) as f64 * theta + p).sin()).sum::<f64>());
                radius - (dy * dy + dx * dx).sqrt()
            }
        }
    }
}

/// Smooth procedural colour field.
#[derive(Debug, Clone)]
struct Texture {
    base: [f64; 3],
    alt: [f64; 3],
    freq: f64,
    dir: (f64, f64),
    checker: bool,
    noise: f64,
    seed: u64,
}

fn hash_noise(seed: u64, y: usize, x: usize, c: usize) -> f64 {
    // splitmix64 finaliser over the packed coordinates
    let mut z = seed ^ ((y as u64) << 40) ^ ((x as u64) << 16) ^ c as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, hue: f64, palette: Palette, background: bool) -> Self {
        let (s_lo, s_hi, v_lo, v_hi) = match (palette, background) {
            (Palette::Vivid, false) => (0.55, 0.95, 0.6, 0.95),
            (Palette::Muted, false) => (0.15, 0.45, 0.35, 0.8),
            (_, true) => (0.05, 0.35, 0.2, 0.75),
        };
        let s = rng.random_range(s_lo..s_hi);
        let v = rng.random_range(v_lo..v_hi);
        let base = hsv(hue, s, v);
        let alt = hsv(hue + rng.random_range(-0.06..0.06), s * rng.random_range(0.6..1.0), (v * rng.random_range(0.6..1.1)).min(1.0));
        let angle = rng.random_range(0.0..PI);
        Self {
            base,
            alt,
            freq: rng.random_range(0.05..0.35),
            dir: (angle.sin(), angle.cos()),
            checker: rng.random_bool(0.3),
            noise: rng.random_range(0.0..0.05),
            seed: rng.random(),
        }
    }

    fn sample(&self, y: usize, x: usize) -> [f64; 3] {
        let (fy, fx) = (y as f64, x as f64);
        let mix = if self.checker {
            let a = (fy * self.freq).sin() * (fx * self.freq).sin();
            0.5 + 0.5 * a.signum() * a.abs().sqrt()
        } else {
            0.5 + 0.5 * ((fy * self.dir.0 + fx * self.dir.1) * self.freq).sin()
        };
        let mut out = [0.0; 3];
        for c in 0..3 {
            let v = self.base[c] * (1.0 - mix) + self.alt[c] * mix + self.noise * hash_noise(self.seed, y, x, c);
            out[c] = v.clamp(0.0, 1.0);
        }
        out
    }
}

fn place_shapes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(Shape, f64)>> {
    for layout in 0..PLACEMENT_LAYOUTS {
        if let Some(shapes) = try_layout(spec, rng, LAYOUT_SHRINK.powi(layout as i32)) {
            return Ok(shapes);
        }
    }
    Err(DcamError::Generation(format!(
        "could not place {} instances within the overlap tolerance in {PLACEMENT_LAYOUTS} layouts",
        spec.instances
    )))
}

/// One layout attempt; sampled radii are multiplied by `scale`.
fn try_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng, scale: f64) -> Option<Vec<(Shape, f64)>> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let side = h.min(w);
    let n = spec.instances;
    let (r_lo, r_hi) = (0.12 * side, (0.30 - 0.03 * (n as f64 - 1.0)) * side);
    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new(); // cy, cx, bounding radius, edge
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let edge = match spec.edge_width {
            Some(e) => e,
            None => rng.random_range(2.0..4.0),
        };
        let family = match spec.shape {
            ShapeFamily::Mixed => [ShapeFamily::Disk, ShapeFamily::Polygon, ShapeFamily::Blob][rng.random_range(0..3)],
            f => f,
        };
        let mut accepted = None;
        for attempt in 0..PLACEMENT_ATTEMPTS {
            // Sampled radii shrink on repeated rejection so crowded scenes still fit.
            let shrink = PLACEMENT_SHRINK.powi(attempt as i32);
            let r = spec.radius.unwrap_or_else(|| scale * shrink * rng.random_range(r_lo..r_hi.max(r_lo + 1.0)));
            let bound = if family == ShapeFamily::Blob { r * (1.0 + 0.1 * BLOB_HARMONICS as f64) } else { r };
            let margin = bound + edge;
            if 2.0 * margin >= h || 2.0 * margin >= w {
                continue;
            }
            let cy = rng.random_range(margin..h - margin);
            let cx = rng.random_range(margin..w - margin);
            let clear = placed.iter().all(|&(py, px, pb, pe)| {
                let d = ((cy - py).powi(2) + (cx - px).powi(2)).sqrt();
                d >= bound + pb + 0.5 * (edge + pe) - spec.overlap_tolerance * bound.min(pb)
            });
            if clear {
                accepted = Some((cy, cx, r, bound));
                break;
            }
        }
        let (cy, cx, r, bound) = accepted?;
        placed.push((cy, cx, bound, edge));
        let shape = match family {
            ShapeFamily::Disk | ShapeFamily::Mixed => Shape::Disk { cy, cx, r },
            ShapeFamily::Polygon => {
                let count = rng.random_range(3..=7);
                let rot = rng.random_range(0.0..2.0 * PI);
                let verts = (0..count)
                    .map(|i| {
                        let jitter = rng.random_range(-0.3..0.3) * PI / count as f64;
                        let a = rot + 2.0 * PI * i as f64 / count as f64 + jitter;
                        let rr = r * rng.random_range(0.8..1.0);
                        (cy + rr * a.sin(), cx + rr * a.cos())
                    })
                    .collect();
                Shape::Polygon { verts }
            }
            ShapeFamily::Blob => {
                let mut harmonics = [(0.0, 0.0); BLOB_HARMONICS];
                for hm in &mut harmonics {
                    *hm = (rng.random_range(0.0..0.1), rng.random_range(0.0..2.0 * PI));
                }
                Shape::Blob { cy, cx, r, harmonics }
            }
        };
        shapes.push((shape, edge));
    }
    Some(shapes)
}

/// Draws one scene. The same `(spec, seed)` always produces the same scene.
pub fn make_synthetic_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    if !(1..=4).contains(&spec.instances) {
        return Err(DcamError::Generation(format!("instance count must be 1 to 4, got {}", spec.instances)));
    }
    if spec.height < MIN_SIDE || spec.width < MIN_SIDE {
        return Err(DcamError::Generation(format!("scene sides must be at least {MIN_SIDE}")));
    }
    if spec.edge_width.is_some_and(|e| !(e >= 2.0)) {
        return Err(DcamError::Generation("edge width must be at least 2 pixels".into()));
    }
    if spec.radius.is_some_and(|r| !(r > 0.0)) {
        return Err(DcamError::Generation("radius must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let shapes = place_shapes(spec, &mut rng)?;
    let hue0 = rng.random_range(0.0..1.0);
    let n = shapes.len();
    let textures: Vec<Texture> = (0..n)
        .map(|k| {
            let hue = hue0 + k as f64 / n as f64 + rng.random_range(-0.05..0.05);
            Texture::random(&mut rng, hue, spec.palette, false)
        })
        .collect();
    let bg_hue = rng.random_range(0.0..1.0);
    let bg_tex = Texture::random(&mut rng, bg_hue, spec.palette, true);

    let mut fg = Image::zeros((3, h, w));
    let mut bg = Image::zeros((3, h, w));
    let mut alpha = AlphaMatte::zeros((h, w));
    let mut instances = vec![AlphaMatte::zeros((h, w)); n];
    let mut coverage = vec![0.0f64; n];
    for y in 0..h {
        for x in 0..w {
            for (k, (shape, edge)) in shapes.iter().enumerate() {
                coverage[k] = (shape.signed_distance(y as f64, x as f64) / edge + 0.5).clamp(0.0, 1.0);
            }
            // Later instances sit on top.
            let mut over = 1.0;
            let mut total = 0.0;
            let mut color = [0.0f64; 3];
            for k in (0..n).rev() {
                let vis = coverage[k] * over;
                over *= 1.0 - coverage[k];
                instances[k][[y, x]] = vis as f32;
                total += vis;
                if vis > 0.0 {
                    let t = textures[k].sample(y, x);
                    for c in 0..3 {
                        color[c] += vis * t[c];
                    }
                }
            }
            let fcol = if total > 0.0 { color.map(|v| v / total) } else { textures[0].sample(y, x) };
            let bcol = bg_tex.sample(y, x);
            for c in 0..3 {
                fg[[c, y, x]] = fcol[c].clamp(0.0, 1.0) as f32;
                bg[[c, y, x]] = bcol[c] as f32;
            }
            alpha[[y, x]] = total.min(1.0) as f32;
        }
    }
    let comp = composite(&fg, &bg, &alpha)?;
    Ok(Scene {
        foreground: fg,
        background: bg,
        composite: comp,
        alpha,
        instance_alphas: instances,
        seed,
        spec: spec.clone(),
    })
}

/// Seed of scene `index` in a dataset drawn from `base_seed`.
pub fn scene_seed(base_seed: u64, index: usize) -> u64 {
    let mut z = base_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes of `size x size` with 1 to `max_instances` instances each.
pub fn generate_dataset(count: usize, base_seed: u64, size: usize, max_instances: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            let seed = scene_seed(base_seed, i);
            let instances = 1 + (seed % max_instances.max(1) as u64) as usize;
            make_synthetic_scene(&SceneSpec::new(size, size, instances), seed)
        })
        .collect()
}

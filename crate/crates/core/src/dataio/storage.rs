//! On-disk dataset layout:
//!
//! ```text
//! manifest.txt
//! images/NNNN.png        composite, 8-bit RGB
//! alphas/NNNN.png        alpha, 16-bit grey
//! instances/NNNN_k.png   instance alphas, 16-bit grey
//! foregrounds/NNNN.png   8-bit RGB
//! backgrounds/NNNN.png   8-bit RGB
//! ```
//!
//! The manifest is one `key=value` record per line; the header line carries
//! the format version and scene count.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::codec::{load_alpha as load_alpha16, load_image as load_rgb, save_alpha as save_alpha16, save_image as save_rgb};
use super::{Palette, Scene, SceneSpec, ShapeFamily};
use crate::error::{DcamError, Result};

pub const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "dcam-dataset";
const VERSION: u32 = 1;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| format!("{x}"))
}

fn spec_record(index: usize, scene: &Scene) -> String {
    let s = &scene.spec;
    let shape = match s.shape {
        ShapeFamily::Disk => "disk",
        ShapeFamily::Polygon => "polygon",
        ShapeFamily::Blob => "blob",
        ShapeFamily::Mixed => "mixed",
    };
    let palette = match s.palette {
        Palette::Vivid => "vivid",
        Palette::Muted => "muted",
    };
    format!(
        "scene={index:04} seed={} height={} width={} instances={} shape={shape} palette={palette} edge={} radius={} overlap={}",
        scene.seed,
        scene.height(),
        scene.width(),
        scene.instance_alphas.len(),
        opt(s.edge_width),
        opt(s.radius),
        s.overlap_tolerance
    )
}

fn paths(root: &Path, index: usize) -> [PathBuf; 4] {
    [
        root.join("images").join(format!("{index:04}.png")),
        root.join("alphas").join(format!("{index:04}.png")),
        root.join("foregrounds").join(format!("{index:04}.png")),
        root.join("backgrounds").join(format!("{index:04}.png")),
    ]
}

fn instance_path(root: &Path, index: usize, k: usize) -> PathBuf {
    root.join("instances").join(format!("{index:04}_{k}.png"))
}

/// Writes `scenes` under `root`, creating directories as needed.
pub fn save_dataset(scenes: &[Scene], root: &Path) -> Result<()> {
    for dir in ["images", "alphas", "instances", "foregrounds", "backgrounds"] {
        fs::create_dir_all(root.join(dir))?;
    }
    let mut manifest = format!("format={FORMAT} version={VERSION} count={}\n", scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let [img, alpha, fg, bg] = paths(root, i);
        save_rgb(&scene.composite, &img)?;
        save_alpha16(&scene.alpha, &alpha)?;
        save_rgb(&scene.foreground, &fg)?;
        save_rgb(&scene.background, &bg)?;
        for (k, inst) in scene.instance_alphas.iter().enumerate() {
            save_alpha16(inst, &instance_path(root, i, k))?;
        }
        manifest.push_str(&spec_record(i, scene));
        manifest.push('\n');
    }
    fs::write(root.join(MANIFEST), manifest)?;
    Ok(())
}

fn parse_fields(line: &str) -> std::result::Result<HashMap<&str, &str>, String> {
    line.split_whitespace()
        .map(|kv| kv.split_once('=').ok_or_else(|| format!("field {kv:?} is not key=value")))
        .collect()
}

fn field<'a, T: std::str::FromStr>(fields: &HashMap<&'a str, &'a str>, key: &str) -> std::result::Result<T, String> {
    let raw = fields.get(key).ok_or_else(|| format!("missing field {key:?}"))?;
    raw.parse().map_err(|_| format!("field {key} has unparsable value {raw:?}"))
}

fn opt_field(fields: &HashMap<&str, &str>, key: &str) -> std::result::Result<Option<f64>, String> {
    match fields.get(key) {
        None | Some(&"auto") => Ok(None),
        Some(_) => field(fields, key).map(Some),
    }
}

fn parse_record(line: &str) -> std::result::Result<(usize, u64, SceneSpec), String> {
    let f = parse_fields(line)?;
    let index: usize = field(&f, "scene")?;
    let seed: u64 = field(&f, "seed")?;
    let shape = match f.get("shape").copied() {
        Some("disk") => ShapeFamily::Disk,
        Some("polygon") => ShapeFamily::Polygon,
        Some("blob") => ShapeFamily::Blob,
        Some("mixed") | None => ShapeFamily::Mixed,
        Some(other) => return Err(format!("unknown shape {other:?}")),
    };
    let palette = match f.get("palette").copied() {
        Some("vivid") | None => Palette::Vivid,
        Some("muted") => Palette::Muted,
        Some(other) => return Err(format!("unknown palette {other:?}")),
    };
    let spec = SceneSpec {
        height: field(&f, "height")?,
        width: field(&f, "width")?,
        instances: field(&f, "instances")?,
        shape,
        palette,
        edge_width: opt_field(&f, "edge")?,
        radius: opt_field(&f, "radius")?,
        overlap_tolerance: f.get("overlap").map_or(Ok(0.0), |_| field(&f, "overlap"))?,
    };
    Ok((index, seed, spec))
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(root: &Path) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(root.join(MANIFEST))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let bad = |record: String, reason: String| DcamError::Dataset { record, reason };
    let (_, header) = lines.next().ok_or_else(|| bad("header".into(), "manifest is empty".into()))?;
    let hf = parse_fields(header).map_err(|r| bad("header".into(), r))?;
    if hf.get("format") != Some(&FORMAT) {
        return Err(bad("header".into(), format!("not a {FORMAT} manifest")));
    }
    let version: u32 = field(&hf, "version").map_err(|r| bad("header".into(), r))?;
    if version != VERSION {
        return Err(bad("header".into(), format!("unsupported version {version}")));
    }
    let count: usize = field(&hf, "count").map_err(|r| bad("header".into(), r))?;
    let mut scenes = Vec::with_capacity(count);
    for (line_no, line) in lines {
        let record = format!("line {}", line_no + 1);
        let (index, seed, spec) = parse_record(line).map_err(|r| bad(record.clone(), r))?;
        let record = format!("scene {index:04} (line {})", line_no + 1);
        if index != scenes.len() {
            return Err(bad(record, format!("expected scene index {}", scenes.len())));
        }
        let [img, alpha, fg, bg] = paths(root, index);
        let mut files = vec![img.clone(), alpha.clone(), fg.clone(), bg.clone()];
        files.extend((0..spec.instances).map(|k| instance_path(root, index, k)));
        if let Some(missing) = files.iter().find(|p| !p.is_file()) {
            return Err(bad(record, format!("missing file {}", missing.display())));
        }
        let load = |e: DcamError| bad(record.clone(), e.to_string());
        let composite = load_rgb(&img).map_err(load)?;
        let alpha = load_alpha16(&alpha).map_err(load)?;
        let foreground = load_rgb(&fg).map_err(load)?;
        let background = load_rgb(&bg).map_err(load)?;
        let instance_alphas = (0..spec.instances)
            .map(|k| load_alpha16(&instance_path(root, index, k)))
            .collect::<Result<Vec<_>>>()
            .map_err(load)?;
        if alpha.dim() != (spec.height, spec.width) {
            return Err(bad(record, format!("alpha is {:?} but the manifest says {}x{}", alpha.dim(), spec.height, spec.width)));
        }
        scenes.push(Scene {
            foreground,
            background,
            composite,
            alpha,
            instance_alphas,
            seed,
            spec,
        });
    }
    if scenes.len() != count {
        return Err(bad("header".into(), format!("declares {count} scenes but lists {}", scenes.len())));
    }
    Ok(scenes)
}

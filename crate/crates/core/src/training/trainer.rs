//! Minibatch training of the full objective with AdamW and cosine annealing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::eval::{evaluate_scenes, EvalSummary};
use super::optim::{AdamW, AdamWConfig};
use super::schedule::{lr_schedule, TrainConfig};
use crate::config::{GuidanceMode, ModelConfig};
use crate::dataio::{apply_augmentation, augment, AlphaMatte, AugmentConfig, AugmentParams, Image, Scene};
use crate::error::{DcamError, Result};
use crate::guidance::{clicks_from_instance, default_click_radius, encode_guidance, trimap_from_alpha, ClickSet, Payload, Trimap};
use crate::infer::{stack_batch, Matter};
use crate::losses::{total_loss, LossReport, LossTargets};
use crate::metrics::MetricReport;
use crate::model::Dcam;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tape;

/// Alpha above which a target instance pixel may receive a positive click.
const CLICKABLE: f32 = 0.9;

/// Summary of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub loss: LossReport,
    /// Mean held-out metrics, when a validation split exists.
    pub val: Option<MetricReport>,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,l_s,l_d,l_m,total,val_mse,lr";

    pub fn csv_line(&self) -> String {
        let val = self.val.map(|v| format!("{:.6e}", v.mse)).unwrap_or_else(|| "nan".into());
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.6e}",
            self.epoch, self.loss.l_s, self.loss.l_d, self.loss.l_m, self.loss.total, val, self.lr
        )
    }
}

/// One network input with its ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub guidance: Array3<f32>,
    /// Target alpha: the selected instance in click mode, the full matte otherwise.
    pub alpha: AlphaMatte,
    /// Ground-truth trimap used by the losses.
    pub trimap: Trimap,
    pub clicks: Option<ClickSet>,
}

/// How guidance is drawn for a sample.
#[derive(Debug, Clone, Copy)]
pub struct GuidancePolicy {
    pub positives: (usize, usize),
    pub negatives: (usize, usize),
    /// Range for the radius of the input trimap in trimap mode.
    pub trimap_radius: (f64, f64),
    /// Radius of the loss trimap in the click and unguided modes.
    pub target_trimap_radius: f64,
}

impl GuidancePolicy {
    pub fn training(cfg: &TrainConfig) -> Self {
        Self {
            positives: (1, 3),
            negatives: (0, 2),
            trimap_radius: cfg.trimap_radius,
            target_trimap_radius: cfg.eval_trimap_radius,
        }
    }

    /// Fixed counts and radius so evaluation inputs depend only on the scene.
    pub fn evaluation(cfg: &TrainConfig) -> Self {
        Self {
            positives: (2, 2),
            negatives: (1, 1),
            trimap_radius: (cfg.eval_trimap_radius, cfg.eval_trimap_radius),
            target_trimap_radius: cfg.eval_trimap_radius,
        }
    }
}

/// Indices of instances with at least one clickable pixel.
fn clickable_instances(scene: &Scene) -> Vec<usize> {
    (0..scene.instance_alphas.len())
        .filter(|&k| scene.instance_alphas[k].iter().any(|&a| a > CLICKABLE))
        .collect()
}

/// Builds a network input for `scene` under `mode`.
pub fn make_sample<R: Rng>(scene: &Scene, mode: GuidanceMode, policy: &GuidancePolicy, rng: &mut R) -> Result<Sample> {
    let (h, w) = (scene.height(), scene.width());
    let draw = |rng: &mut R, (lo, hi): (usize, usize)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    match mode {
        GuidanceMode::Click => {
            let candidates = clickable_instances(scene);
            let Some(&k) = candidates.get(rng.random_range(0..candidates.len().max(1))) else {
                return Err(DcamError::Guidance(format!("scene {} has no clickable instance", scene.seed)));
            };
            let target = scene.instance_alphas[k].clone();
            let others: Vec<AlphaMatte> = scene
                .instance_alphas
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .map(|(_, a)| a.clone())
                .collect();
            let n_pos = draw(rng, policy.positives);
            let n_neg = draw(rng, policy.negatives);
            let clicks = clicks_from_instance(&target, &others, rng, n_pos, n_neg)?;
            let g = encode_guidance(mode, Payload::Clicks(&clicks), h, w, default_click_radius(h, w))?;
            Ok(Sample {
                image: scene.composite.clone(),
                guidance: g.raster,
                trimap: trimap_from_alpha(&target, policy.target_trimap_radius),
                alpha: target,
                clicks: Some(clicks),
            })
        }
        GuidanceMode::None => Ok(Sample {
            image: scene.composite.clone(),
            guidance: Array3::zeros((3, h, w)),
            trimap: trimap_from_alpha(&scene.alpha, policy.target_trimap_radius),
            alpha: scene.alpha.clone(),
            clicks: None,
        }),
        GuidanceMode::Trimap => {
            let (lo, hi) = policy.trimap_radius;
            let radius = if lo < hi { rng.random_range(lo..=hi) } else { lo };
            let trimap = trimap_from_alpha(&scene.alpha, radius);
            let g = encode_guidance(mode, Payload::Trimap(&trimap), h, w, 0.0)?;
            Ok(Sample {
                image: scene.composite.clone(),
                guidance: g.raster,
                trimap,
                alpha: scene.alpha.clone(),
                clicks: None,
            })
        }
    }
}

/// The deterministic evaluation input for a scene.
pub fn evaluation_sample(scene: &Scene, mode: GuidanceMode, cfg: &TrainConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x5eed_e7a1);
    make_sample(scene, mode, &GuidancePolicy::evaluation(cfg), &mut rng)
}

/// Stacked network inputs and loss targets.
pub struct Batch {
    pub image: ndarray::ArrayD<f32>,
    pub guidance: ndarray::ArrayD<f32>,
    pub targets: LossTargets<f32>,
}

pub fn collate(samples: &[Sample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(DcamError::Contract("empty batch".into()));
    }
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let guides: Vec<_> = samples.iter().map(|s| &s.guidance).collect();
    let alphas: Vec<Array3<f32>> = samples.iter().map(|s| s.alpha.clone().insert_axis(Axis(0))).collect();
    let alpha_refs: Vec<_> = alphas.iter().collect();
    let trimaps: Vec<_> = samples.iter().map(|s| s.trimap.view()).collect();
    Ok(Batch {
        image: stack_batch(&images)?,
        guidance: stack_batch(&guides)?,
        targets: LossTargets {
            alpha: stack_batch(&alpha_refs)?,
            trimap: ndarray::stack(Axis(0), &trimaps).map_err(|e| DcamError::Shape(e.to_string()))?,
        },
    })
}

/// Square crop at the training size: augmented, or a centre crop.
fn training_view<R: Rng>(scene: &Scene, cfg: &TrainConfig, rng: &mut R) -> Result<Scene> {
    let crop = cfg.crop_size;
    if cfg.augment {
        return augment(scene, &AugmentConfig::new(crop), rng);
    }
    if scene.height() == crop && scene.width() == crop {
        return Ok(scene.clone());
    }
    if scene.height() < crop || scene.width() < crop {
        return Err(DcamError::Augmentation(format!(
            "scene {}x{} is smaller than crop {crop} and augmentation is off",
            scene.height(),
            scene.width()
        )));
    }
    let params = AugmentParams {
        crop_y: (scene.height() - crop) / 2,
        crop_x: (scene.width() - crop) / 2,
        ..AugmentParams::neutral()
    };
    apply_augmentation(scene, &params, crop)
}

/// Deterministic train/validation split of scene indices.
pub fn split_indices(count: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x0005_9117));
    let mut n_val = (count as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && count >= 2 {
        n_val = n_val.clamp(1, count - 1);
    }
    let val = idx.split_off(count - n_val);
    (idx, val)
}

fn mean_loss(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        l_s: sum(|r| r.l_s),
        l_d: sum(|r| r.l_d),
        l_m: sum(|r| r.l_m),
        total: sum(|r| r.total),
        regime: reports[0].regime,
        empty_unknown: reports.iter().any(|r| r.empty_unknown),
    }
}

/// Diagnostic written when a batch produces a non-finite loss.
#[derive(Debug, Serialize, Deserialize)]
pub struct Replay {
    pub epoch: usize,
    pub batch: usize,
    pub step: usize,
    pub seed: u64,
    pub scene_seeds: Vec<u64>,
    pub lr: f64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters with the lowest validation MSE (the last epoch without a split).
    pub best: Checkpoint,
    pub last: Checkpoint,
}

/// Where checkpoints and diagnostics go; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Initial parameters, e.g. to resume; freshly drawn when absent.
    pub init: Option<ParamStore<f32>>,
}

fn replay_path(opts: &TrainOptions) -> PathBuf {
    match &opts.out_dir {
        Some(d) => d.join("replay.json"),
        None => std::env::temp_dir().join(format!("dcam-replay-{}.json", std::process::id())),
    }
}

fn non_finite(opts: &TrainOptions, replay: Replay) -> DcamError {
    let path = replay_path(opts);
    if let Some(dir) = path.parent() {
        let _ = std::fs::create_dir_all(dir);
    }
    match serde_json::to_vec_pretty(&replay) {
        Ok(bytes) => {
            if let Err(e) = std::fs::write(&path, bytes) {
                log::error!("could not write replay file {}: {e}", path.display());
            }
        }
        Err(e) => log::error!("could not serialise replay: {e}"),
    }
    DcamError::NonFiniteLoss {
        epoch: replay.epoch,
        batch: replay.batch,
        reason: replay.reason,
        replay: path,
    }
}

/// Trains from scratch on `scenes`, reporting each epoch to `on_epoch`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    scenes: &[Scene],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    if scenes.is_empty() {
        return Err(DcamError::Config("training needs at least one scene".into()));
    }
    if cfg.joint_none && model_cfg.guidance_mode != GuidanceMode::Click {
        return Err(DcamError::Config("joint unguided training requires click mode".into()));
    }
    let (model, fresh) = Dcam::init::<f32>(model_cfg, cfg.seed)?;
    let mut params = match &opts.init {
        Some(p) => p.clone(),
        None => fresh,
    };
    let mut opt = AdamW::new(
        &params,
        AdamWConfig {
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    );
    let (train_idx, val_idx) = split_indices(scenes.len(), cfg.val_fraction, cfg.seed);
    let val_scenes: Vec<Scene> = val_idx.iter().map(|&i| scenes[i].clone()).collect();
    let batches_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let policy = GuidancePolicy::training(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0usize;
    let snapshot = |params: &ParamStore<f32>, opt: &AdamW, epoch: usize, history: &[EpochRecord]| Checkpoint {
        model: model_cfg.clone(),
        train: cfg.clone(),
        epoch,
        history: history.to_vec(),
        params: params.clone(),
        optimizer: Some(opt.clone()),
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut reports = Vec::with_capacity(batches_per_epoch);
        let mut lr = cfg.lr_init;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mode = if cfg.joint_none && rng.random_bool(0.5) { GuidanceMode::None } else { model_cfg.guidance_mode };
            let mut samples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let view = training_view(&scenes[i], cfg, &mut rng)?;
                match make_sample(&view, mode, &policy, &mut rng) {
                    Ok(s) => samples.push(s),
                    // Heavy occlusion or cropping can leave no clickable pixel.
                    Err(DcamError::Guidance(reason)) => log::debug!("skipping scene {}: {reason}", scenes[i].seed),
                    Err(e) => return Err(e),
                }
            }
            if samples.is_empty() {
                continue;
            }
            lr = lr_schedule(step, total_steps, cfg)?;
            let batch = collate(&samples)?;
            let replay = |reason: String| Replay {
                epoch,
                batch: b,
                step,
                seed: cfg.seed,
                scene_seeds: chunk.iter().map(|&i| scenes[i].seed).collect(),
                lr,
                reason,
            };
            let grads = {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &params, true);
                let x = tape.constant(batch.image);
                let g = tape.constant(batch.guidance);
                let forward = model
                    .forward(&ctx, x, g)
                    .and_then(|pred| total_loss(&pred, &batch.targets, model_cfg));
                let (loss, report) = match forward {
                    Ok(v) => v,
                    Err(DcamError::Numeric(reason)) => return Err(non_finite(opts, replay(reason))),
                    Err(e) => return Err(e),
                };
                if !report.total.is_finite() {
                    return Err(non_finite(opts, replay(format!("loss is {}", report.total))));
                }
                reports.push(report);
                let mut g = tape.backward(loss);
                ctx.param_grads(&mut g)
            };
            if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(non_finite(opts, replay("non-finite gradient".into())));
            }
            opt.update(&mut params, &grads, lr)?;
            step += 1;
        }
        if reports.is_empty() {
            return Err(DcamError::Guidance(format!("epoch {epoch} produced no usable samples")));
        }
        let val = if val_scenes.is_empty() {
            None
        } else {
            let matter = Matter::new(model.clone(), params.clone());
            Some(evaluate_scenes(&matter, &val_scenes, model_cfg.guidance_mode, cfg)?.mean)
        };
        let record = EpochRecord {
            epoch,
            loss: mean_loss(&reports),
            val,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        let score = val.map(|v| v.mse).unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _)| score <= *s) {
            let ckpt = snapshot(&params, &opt, epoch, &history);
            if let Some(dir) = &opts.out_dir {
                ckpt.save(&dir.join("best.ckpt"))?;
            }
            best = Some((score, ckpt));
        }
    }
    let last = snapshot(&params, &opt, cfg.epochs, &history);
    if let Some(dir) = &opts.out_dir {
        last.save(&dir.join("last.ckpt"))?;
        write_history(&dir.join("history.csv"), &history)?;
    }
    let mut best = best.expect("at least one epoch").1;
    best.history = history;
    Ok(TrainOutput { best, last })
}

/// Writes the per-epoch log as CSV.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::from(EpochRecord::CSV_HEADER);
    text.push('\n');
    for r in history {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Metrics of freshly initialised parameters, for comparison with training.
pub fn untrained_baseline(model_cfg: &ModelConfig, cfg: &TrainConfig, scenes: &[Scene]) -> Result<EvalSummary> {
    let (model, params) = Dcam::init::<f32>(model_cfg, cfg.seed)?;
    evaluate_scenes(&Matter::new(model, params), scenes, model_cfg.guidance_mode, cfg)
}

//! Held-out evaluation of a network on synthetic scenes.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::schedule::TrainConfig;
use super::trainer::evaluation_sample;
use crate::config::GuidanceMode;
use crate::dataio::{AlphaMatte, Scene};
use crate::error::{DcamError, Result};
use crate::infer::{InferOptions, Matter};
use crate::metrics::{evaluate, mean_report, MetricReport, Region};

/// Binarisation threshold for IoU.
pub const IOU_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub seed: u64,
    pub report: MetricReport,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenes: Vec<SceneEval>,
    /// Whole-image metrics averaged over scenes.
    pub mean: MetricReport,
    pub mean_iou: f64,
}

impl EvalSummary {
    /// Share of scenes whose IoU exceeds `threshold`.
    pub fn iou_pass_rate(&self, threshold: f64) -> f64 {
        let n = self.scenes.iter().filter(|s| s.iou > threshold).count();
        n as f64 / self.scenes.len().max(1) as f64
    }
}

/// Intersection over union of `pred > 0.5` and `gt > 0.5`; 1 when both are empty.
pub fn binary_iou(pred: ArrayView2<f32>, gt: ArrayView2<f32>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p > IOU_THRESHOLD, g > IOU_THRESHOLD);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn to_f64(a: &AlphaMatte) -> ndarray::Array2<f64> {
    a.mapv(f64::from)
}

/// Predicts every scene with its deterministic guidance and scores the result.
pub fn evaluate_scenes(matter: &Matter, scenes: &[Scene], mode: GuidanceMode, cfg: &TrainConfig) -> Result<EvalSummary> {
    if scenes.is_empty() {
        return Err(DcamError::Metric("no scenes to evaluate".into()));
    }
    let opts = InferOptions::default();
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let sample = evaluation_sample(scene, mode, cfg)?;
        let trimap = (mode == GuidanceMode::Trimap).then_some(&sample.trimap);
        let pred = matter.predict_raster(&sample.image, &sample.guidance, trimap, &opts)?;
        let report = evaluate(to_f64(&pred).view(), to_f64(&sample.alpha).view(), Region::Whole)?;
        out.push(SceneEval {
            seed: scene.seed,
            report,
            iou: binary_iou(pred.view(), sample.alpha.view()),
        });
    }
    let reports: Vec<MetricReport> = out.iter().map(|s| s.report).collect();
    Ok(EvalSummary {
        mean: mean_report(&reports).expect("non-empty"),
        mean_iou: out.iter().map(|s| s.iou).sum::<f64>() / out.len() as f64,
        scenes: out,
    })
}

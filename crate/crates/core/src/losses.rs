//! Training objectives for the two guidance regimes.
//!
//! Coarse guidance (clicks or none) supervises every auxiliary site with a
//! focal cross-entropy against the trimap and the final alpha with a
//! Charbonnier penalty over the unknown region. Trimap guidance supervises
//! every site with the Charbonnier penalty and adds a Laplacian pyramid term
//! on the final alpha.

use std::rc::Rc;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{DcamError, Result};
use crate::guidance::UNKNOWN;
use crate::model::MattePrediction;
use crate::tensor::{focal_cross_entropy, masked_charbonnier, nearest_taps, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Coarse,
    Trimap,
}

impl Regime {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        if cfg.guidance_mode.predicts_trimap() {
            Regime::Coarse
        } else {
            Regime::Trimap
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_s: f64,
    pub l_d: f64,
    pub l_m: f64,
    pub total: f64,
    pub regime: Regime,
    /// Set when some Charbonnier term saw no unknown pixels and contributed 0.
    pub empty_unknown: bool,
}

/// Ground truth for a batch at input resolution.
#[derive(Debug, Clone)]
pub struct LossTargets<F: Scalar> {
    /// `(N, 1, H, W)`.
    pub alpha: ArrayD<F>,
    /// `(N, H, W)` trimap labels.
    pub trimap: Array3<u8>,
}

/// Nearest-neighbour label downsampling to `(h, w)`, flattened row-major.
pub fn downsample_labels(trimap: &Array3<u8>, h: usize, w: usize) -> Vec<u8> {
    let (n, th, tw) = trimap.dim();
    let (ty, tx) = (nearest_taps(th, h), nearest_taps(tw, w));
    let mut out = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for row in &ty {
            for col in &tx {
                out.push(trimap[[b, row[0].0, col[0].0]]);
            }
        }
    }
    out
}

/// Block-mean downsampling of an `(N, 1, H, W)` alpha by an integer factor.
pub fn downsample_alpha<F: Scalar>(alpha: &ArrayD<F>, h: usize, w: usize) -> Result<ArrayD<F>> {
    let s = alpha.shape();
    let (n, ah, aw) = (s[0], s[2], s[3]);
    if ah % h != 0 || aw % w != 0 || ah / h != aw / w {
        return Err(DcamError::Contract(format!("cannot downsample {ah}x{aw} alpha to {h}x{w}")));
    }
    let f = ah / h;
    if f == 1 {
        return Ok(alpha.clone());
    }
    let norm = F::of(1.0 / (f * f) as f64);
    let mut out = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut acc = F::zero();
                for dy in 0..f {
                    for dx in 0..f {
                        acc += alpha[[b, 0, y * f + dy, x * f + dx]];
                    }
                }
                out[[b, 0, y, x]] = acc * norm;
            }
        }
    }
    Ok(out)
}

fn ensure_finite_logits<F: Scalar>(v: Var<'_, F>, site: &str) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DcamError::Numeric(format!("non-finite logits at {site}")))
    }
}

/// Mean focal cross-entropy of `(N, 3, h, w)` logits against a full-size
/// trimap, downsampled to the logits' resolution by nearest neighbour.
pub fn focal_ce<'t, F: Scalar>(logits: Var<'t, F>, trimap: &Array3<u8>, gamma: f64) -> Result<Var<'t, F>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != 3 || s[0] != trimap.dim().0 {
        return Err(DcamError::Contract(format!("focal loss needs (N, 3, h, w) logits, got {s:?}")));
    }
    if gamma < 0.0 {
        return Err(DcamError::Config("focal gamma must be non-negative".into()));
    }
    ensure_finite_logits(logits, "focal loss input")?;
    let labels = downsample_labels(trimap, s[2], s[3]);
    Ok(focal_cross_entropy(logits, Rc::new(labels), gamma))
}

/// Mean Charbonnier penalty over the unknown region. Ground truth is brought
/// to the prediction's resolution first. Returns the loss and whether the
/// unknown region was empty (in which case the loss is 0).
pub fn charbonnier_unknown<'t, F: Scalar>(pred: Var<'t, F>, targets: &LossTargets<F>, epsilon: f64) -> Result<(Var<'t, F>, bool)> {
    let s = pred.shape();
    if s.len() != 4 || s[1] != 1 || s[0] != targets.trimap.dim().0 {
        return Err(DcamError::Contract(format!("Charbonnier loss needs (N, 1, h, w) alpha, got {s:?}")));
    }
    if !(epsilon > 0.0) {
        return Err(DcamError::Config("epsilon must be positive".into()));
    }
    let gt = downsample_alpha(&targets.alpha, s[2], s[3])?;
    let mask: Vec<bool> = downsample_labels(&targets.trimap, s[2], s[3])
        .into_iter()
        .map(|l| l == UNKNOWN)
        .collect();
    let empty = !mask.iter().any(|&m| m);
    if empty {
        log::warn!("unknown region is empty at {}x{}; Charbonnier term is 0", s[2], s[3]);
    }
    Ok((masked_charbonnier(pred, Rc::new(gt), Rc::new(mask), epsilon), empty))
}

/// Weighted L1 distance between Laplacian pyramids of `pred` and `gt`,
/// levels `1..=levels` weighted by `2^j`, each level averaged over pixels.
pub fn laplacian_pyramid_loss<'t, F: Scalar>(pred: Var<'t, F>, gt: &ArrayD<F>, levels: usize) -> Result<Var<'t, F>> {
    let s = pred.shape();
    if s != gt.shape() || s.len() != 4 {
        return Err(DcamError::Contract(format!("pyramid loss shapes {s:?} vs {:?}", gt.shape())));
    }
    if levels < 1 {
        return Err(DcamError::Config("pyramid needs at least one level".into()));
    }
    let min_side = 1usize << levels;
    if s[2] < min_side || s[3] < min_side {
        return Err(DcamError::Config(format!(
            "{}x{} is too small for a {levels}-level pyramid (needs {min_side})",
            s[2], s[3]
        )));
    }
    // The pyramid is linear, so the difference of pyramids is the pyramid of
    // the difference.
    let mut g = pred.sub(pred.tape().constant(gt.clone()));
    let mut total: Option<Var<'t, F>> = None;
    for j in 1..=levels {
        let gs = g.shape();
        let next = g.blur5().decimate2();
        let up = next.zero_insert2(gs[2], gs[3]).blur5().scale(F::of(4.0));
        let term = g.sub(up).abs().mean().scale(F::of((1u64 << j) as f64));
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
        g = next;
    }
    Ok(total.expect("at least one level"))
}

/// The full objective. Returns the differentiable total and its breakdown.
pub fn total_loss<'t, F: Scalar>(pred: &MattePrediction<'t, F>, targets: &LossTargets<F>, cfg: &ModelConfig) -> Result<(Var<'t, F>, LossReport)> {
    let regime = Regime::for_config(cfg);
    let want = match regime {
        Regime::Coarse => 3,
        Regime::Trimap => 1,
    };
    for (site, v) in [("P_S", pred.p_s), ("P_D", pred.p_d), ("P_M", pred.p_m)] {
        if v.shape()[1] != want {
            return Err(DcamError::Contract(format!(
                "{site} has {} channels but the {regime:?} regime needs {want}",
                v.shape()[1]
            )));
        }
    }
    let eps = cfg.epsilon;
    let mut empty = false;
    let (l_s, l_d, l_m) = match regime {
        Regime::Coarse => {
            let gamma = cfg.focal_gamma;
            let (alpha_term, e) = charbonnier_unknown(pred.alpha, targets, eps)?;
            empty |= e;
            (
                focal_ce(pred.p_s, &targets.trimap, gamma)?,
                focal_ce(pred.p_d, &targets.trimap, gamma)?,
                focal_ce(pred.p_m, &targets.trimap, gamma)?.add(alpha_term),
            )
        }
        Regime::Trimap => {
            let mut charb = |v: Var<'t, F>| -> Result<Var<'t, F>> {
                let (l, e) = charbonnier_unknown(v, targets, eps)?;
                empty |= e;
                Ok(l)
            };
            let l_s = charb(pred.p_s)?;
            let l_d = charb(pred.p_d)?;
            let l_m = charb(pred.p_m)?
                .add(charb(pred.alpha)?)
                .add(laplacian_pyramid_loss(pred.alpha, &targets.alpha, cfg.pyramid_levels_j)?);
            (l_s, l_d, l_m)
        }
    };
    let total = l_s.add(l_d).add(l_m);
    let report = LossReport {
        l_s: l_s.item().as_f64(),
        l_d: l_d.item().as_f64(),
        l_m: l_m.item().as_f64(),
        total: total.item().as_f64(),
        regime,
        empty_unknown: empty,
    };
    Ok((total, report))
}

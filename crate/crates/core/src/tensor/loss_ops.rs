use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::{dims4, Scalar, Var};

/// Mean focal cross-entropy of `(N, K, H, W)` logits against integer labels
/// laid out as `(N, H, W)` in row-major order.
pub fn focal_cross_entropy<'t, F: Scalar>(logits: Var<'t, F>, labels: Rc<Vec<u8>>, gamma: f64) -> Var<'t, F> {
    let lv = logits.value();
    let (n, k, h, w) = dims4(lv.shape());
    let plane = h * w;
    assert_eq!(labels.len(), n * plane, "focal_cross_entropy: label count");
    let ls = lv.as_slice().unwrap();
    let g = F::of(gamma);
    let count = F::of((n * plane) as f64);
    // Per pixel: softmax probabilities and the focal factor's derivative term.
    let mut probs = vec![F::zero(); ls.len()];
    let mut coef = vec![F::zero(); n * plane];
    let mut total = F::zero();
    for b in 0..n {
        for p in 0..plane {
            let t = labels[b * plane + p] as usize;
            assert!(t < k, "label {t} out of range for {k} classes");
            let at = |c: usize| (b * k + c) * plane + p;
            let max = (0..k).map(|c| ls[at(c)]).fold(F::neg_infinity(), F::max);
            let denom: F = (0..k).map(|c| (ls[at(c)] - max).exp()).sum();
            let log_denom = denom.ln();
            for c in 0..k {
                probs[at(c)] = (ls[at(c)] - max).exp() / denom;
            }
            let log_pt = ls[at(t)] - max - log_denom;
            let pt = probs[at(t)];
            // 1 - p_t from the other classes keeps precision when p_t ~ 1.
            let q: F = (0..k).filter(|&c| c != t).map(|c| probs[at(c)]).sum();
            let focal = if gamma == 0.0 { F::one() } else { q.powf(g) };
            total += -focal * log_pt;
            // dL/dz_c = [g q^(g-1) p_t log p_t - q^g] (delta_tc - p_c)
            let slope = if gamma == 0.0 || q <= F::zero() {
                F::zero()
            } else {
                g * q.powf(g - F::one()) * pt * log_pt
            };
            coef[b * plane + p] = slope - focal;
        }
    }
    let out = ArrayD::from_elem(IxDyn(&[]), total / count);
    let probs = Rc::new(probs);
    logits.tape.push_op(out, &[logits], move |gr, _| {
        let scale = *gr.iter().next().unwrap() / count;
        let mut d = vec![F::zero(); n * k * plane];
        for b in 0..n {
            for p in 0..plane {
                let t = labels[b * plane + p] as usize;
                let cf = coef[b * plane + p] * scale;
                for c in 0..k {
                    let i = (b * k + c) * plane + p;
                    let delta = if c == t { F::one() } else { F::zero() };
                    d[i] = cf * (delta - probs[i]);
                }
            }
        }
        vec![Some(ArrayD::from_shape_vec(IxDyn(&[n, k, h, w]), d).unwrap())]
    })
}

/// Masked Charbonnier penalty: the mean of `sqrt((pred - target)^2 + eps^2)`
/// over pixels where `mask` is set. An empty mask yields zero.
pub fn masked_charbonnier<'t, F: Scalar>(pred: Var<'t, F>, target: Rc<ArrayD<F>>, mask: Rc<Vec<bool>>, eps: f64) -> Var<'t, F> {
    let pv = pred.value();
    assert_eq!(pv.shape(), target.shape(), "charbonnier: shape mismatch");
    assert_eq!(pv.len(), mask.len(), "charbonnier: mask size");
    let e2 = F::of(eps * eps);
    let count = mask.iter().filter(|&&m| m).count();
    let denom = F::of(count.max(1) as f64);
    let ps = pv.as_slice().unwrap();
    let ts = target.as_slice().unwrap();
    let mut total = F::zero();
    let mut deriv = vec![F::zero(); ps.len()];
    for i in 0..ps.len() {
        if mask[i] {
            let d = ps[i] - ts[i];
            let r = (d * d + e2).sqrt();
            total += r;
            deriv[i] = d / r / denom;
        }
    }
    let value = if count == 0 { F::zero() } else { total / denom };
    let shape = pv.shape().to_vec();
    pred.tape.push_op(ArrayD::from_elem(IxDyn(&[]), value), &[pred], move |g, _| {
        let gv = *g.iter().next().unwrap();
        let d: Vec<F> = deriv.iter().map(|&v| v * gv).collect();
        vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), d).unwrap())]
    })
}

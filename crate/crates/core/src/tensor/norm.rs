use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::{dims4, Scalar, Var};

/// Group normalization over an NCHW tensor with per-channel affine terms.
///
/// Each sample's channels are split into `groups` contiguous groups; every
/// group is normalized with its own biased mean and variance.
pub fn group_norm<'t, F: Scalar>(x: Var<'t, F>, gamma: Var<'t, F>, beta: Var<'t, F>, groups: usize, eps: f64) -> Var<'t, F> {
    let xv = x.value();
    let (n, c, h, w) = dims4(xv.shape());
    assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
    let (gv, bv) = (gamma.value(), beta.value());
    assert_eq!(gv.len(), c);
    assert_eq!(bv.len(), c);
    let cpg = c / groups;
    let plane = h * w;
    let span = cpg * plane;
    let count = F::of(span as f64);
    let eps = F::of(eps);
    let xs = xv.as_slice().unwrap();
    let mut xhat = vec![F::zero(); xs.len()];
    let mut inv_std = vec![F::zero(); n * groups];
    let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, h, w]));
    let os = out.as_slice_mut().unwrap();
    for ng in 0..n * groups {
        let seg = &xs[ng * span..(ng + 1) * span];
        let mean = seg.iter().copied().sum::<F>() / count;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / count;
        let is = F::one() / (var + eps).sqrt();
        inv_std[ng] = is;
        let first_channel = (ng % groups) * cpg;
        for j in 0..cpg {
            let ch = first_channel + j;
            let (gm, bt) = (gv[ch], bv[ch]);
            let base = ng * span + j * plane;
            for i in base..base + plane {
                let xh = (xs[i] - mean) * is;
                xhat[i] = xh;
                os[i] = gm * xh + bt;
            }
        }
    }
    let xhat = Rc::new(xhat);
    x.tape.push_op(out, &[x, gamma, beta], move |g, needs| {
        let gs = g.as_slice().unwrap();
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        let mut dx = needs[0].then(|| ArrayD::<F>::zeros(IxDyn(&[n, c, h, w])));
        for ng in 0..n * groups {
            let first_channel = (ng % groups) * cpg;
            let mut sum_d = F::zero();
            let mut sum_dx = F::zero();
            for j in 0..cpg {
                let ch = first_channel + j;
                let base = ng * span + j * plane;
                for i in base..base + plane {
                    dgamma[ch] += gs[i] * xhat[i];
                    dbeta[ch] += gs[i];
                    let d = gs[i] * gv[ch];
                    sum_d += d;
                    sum_dx += d * xhat[i];
                }
            }
            if let Some(dx) = dx.as_mut() {
                let ds = dx.as_slice_mut().unwrap();
                let (mean_d, mean_dx) = (sum_d / count, sum_dx / count);
                let is = inv_std[ng];
                for j in 0..cpg {
                    let ch = first_channel + j;
                    let base = ng * span + j * plane;
                    for i in base..base + plane {
                        ds[i] = is * (gs[i] * gv[ch] - mean_d - xhat[i] * mean_dx);
                    }
                }
            }
        }
        vec![
            dx,
            needs[1].then(|| ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap()),
            needs[2].then(|| ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap()),
        ]
    })
}

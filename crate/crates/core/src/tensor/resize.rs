//! Separable linear resampling of the spatial axes of NCHW tensors.
//!
//! Every operation here is a pair of 1-D linear maps (rows, then columns),
//! each described by a tap table: for output index `o`, a list of
//! `(input index, weight)` pairs. The backward pass applies the transposed
//! tables.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::{dims4, Scalar, Var};

/// Tap table for one axis: `taps[o]` lists `(input index, weight)`.
pub type Taps = Vec<Vec<(usize, f64)>>;

/// Bilinear source taps (half-pixel centers, edges clamped).
pub fn bilinear_taps(input: usize, output: usize) -> Taps {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            if i1 == i0 || l1 == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - l1), (i1, l1)]
            }
        })
        .collect()
}

pub fn nearest_taps(input: usize, output: usize) -> Taps {
    (0..output)
        .map(|o| {
            let i = ((o as f64 * input as f64 / output as f64).floor() as usize).min(input - 1);
            vec![(i, 1.0)]
        })
        .collect()
}

/// Mirror an out-of-range index back into `[0, n)` without repeating the edge.
pub fn reflect101(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let last = n as isize - 1;
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

/// 5-tap binomial blur `[1, 4, 6, 4, 1] / 16` with mirrored borders.
pub fn binomial5_taps(n: usize) -> Taps {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    (0..n)
        .map(|o| {
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(5);
            for (t, &k) in K.iter().enumerate() {
                let i = reflect101(o as isize + t as isize - 2, n);
                match taps.iter_mut().find(|(j, _)| *j == i) {
                    Some(entry) => entry.1 += k,
                    None => taps.push((i, k)),
                }
            }
            taps
        })
        .collect()
}

/// Keep every other sample, starting at index 0.
pub fn decimate_taps(n: usize) -> Taps {
    (0..n.div_ceil(2)).map(|o| vec![(2 * o, 1.0)]).collect()
}

/// Place sample `i` at output `2i`, zeros elsewhere.
pub fn zero_insert_taps(input: usize, output: usize) -> Taps {
    (0..output)
        .map(|o| if o % 2 == 0 && o / 2 < input { vec![(o / 2, 1.0)] } else { Vec::new() })
        .collect()
}

fn convert<F: Scalar>(taps: &Taps) -> Vec<Vec<(usize, F)>> {
    taps.iter()
        .map(|t| t.iter().map(|&(i, w)| (i, F::of(w))).collect())
        .collect()
}

/// out[p, o, x] = sum taps_h[o] of src[p, i, x]
fn along_rows<F: Scalar>(src: &[F], planes: usize, h: usize, w: usize, taps: &[Vec<(usize, F)>]) -> Vec<F> {
    let ho = taps.len();
    let mut out = vec![F::zero(); planes * ho * w];
    for p in 0..planes {
        for (o, t) in taps.iter().enumerate() {
            let dst = &mut out[(p * ho + o) * w..(p * ho + o + 1) * w];
            for &(i, wt) in t {
                let s = &src[(p * h + i) * w..(p * h + i + 1) * w];
                dst.iter_mut().zip(s).for_each(|(d, &v)| *d += wt * v);
            }
        }
    }
    out
}

fn along_rows_t<F: Scalar>(g: &[F], planes: usize, h: usize, w: usize, taps: &[Vec<(usize, F)>]) -> Vec<F> {
    let ho = taps.len();
    let mut out = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        for (o, t) in taps.iter().enumerate() {
            let s = &g[(p * ho + o) * w..(p * ho + o + 1) * w];
            for &(i, wt) in t {
                let dst = &mut out[(p * h + i) * w..(p * h + i + 1) * w];
                dst.iter_mut().zip(s).for_each(|(d, &v)| *d += wt * v);
            }
        }
    }
    out
}

fn along_cols<F: Scalar>(src: &[F], rows: usize, w: usize, taps: &[Vec<(usize, F)>]) -> Vec<F> {
    let wo = taps.len();
    let mut out = vec![F::zero(); rows * wo];
    for r in 0..rows {
        let s = &src[r * w..(r + 1) * w];
        let d = &mut out[r * wo..(r + 1) * wo];
        for (o, t) in taps.iter().enumerate() {
            d[o] = t.iter().map(|&(i, wt)| wt * s[i]).sum();
        }
    }
    out
}

fn along_cols_t<F: Scalar>(g: &[F], rows: usize, w: usize, taps: &[Vec<(usize, F)>]) -> Vec<F> {
    let wo = taps.len();
    let mut out = vec![F::zero(); rows * w];
    for r in 0..rows {
        let s = &g[r * wo..(r + 1) * wo];
        let d = &mut out[r * w..(r + 1) * w];
        for (o, t) in taps.iter().enumerate() {
            for &(i, wt) in t {
                d[i] += wt * s[o];
            }
        }
    }
    out
}

/// Applies `taps_h` to the height axis and `taps_w` to the width axis.
pub fn resample<'t, F: Scalar>(x: Var<'t, F>, taps_h: &Taps, taps_w: &Taps) -> Var<'t, F> {
    let xv = x.value();
    let (n, c, h, w) = dims4(xv.shape());
    assert!(taps_h.iter().flatten().all(|&(i, _)| i < h), "row taps out of range");
    assert!(taps_w.iter().flatten().all(|&(i, _)| i < w), "column taps out of range");
    let (ho, wo) = (taps_h.len(), taps_w.len());
    let th: Rc<Vec<Vec<(usize, F)>>> = Rc::new(convert(taps_h));
    let tw: Rc<Vec<Vec<(usize, F)>>> = Rc::new(convert(taps_w));
    let tmp = along_cols(xv.as_slice().unwrap(), n * c * h, w, &tw);
    let out = along_rows(&tmp, n * c, h, wo, &th);
    let out = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap();
    x.tape.push_op(out, &[x], move |g, _| {
        let gt = along_rows_t(g.as_slice().unwrap(), n * c, h, wo, &th);
        let dx = along_cols_t(&gt, n * c * h, w, &tw);
        vec![Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
    })
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn resize_bilinear(self, height: usize, width: usize) -> Var<'t, F> {
        let s = self.shape();
        if s[2] == height && s[3] == width {
            return self;
        }
        resample(self, &bilinear_taps(s[2], height), &bilinear_taps(s[3], width))
    }

    pub fn resize_nearest(self, height: usize, width: usize) -> Var<'t, F> {
        let s = self.shape();
        if s[2] == height && s[3] == width {
            return self;
        }
        resample(self, &nearest_taps(s[2], height), &nearest_taps(s[3], width))
    }

    pub fn blur5(self) -> Var<'t, F> {
        let s = self.shape();
        resample(self, &binomial5_taps(s[2]), &binomial5_taps(s[3]))
    }

    pub fn decimate2(self) -> Var<'t, F> {
        let s = self.shape();
        resample(self, &decimate_taps(s[2]), &decimate_taps(s[3]))
    }

    pub fn zero_insert2(self, height: usize, width: usize) -> Var<'t, F> {
        let s = self.shape();
        resample(self, &zero_insert_taps(s[2], height), &zero_insert_taps(s[3], width))
    }
}

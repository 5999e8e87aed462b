use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use super::{dims4, Scalar, Var};

/// Geometry of a 2-D convolution. Padding is symmetric and zero-filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvOptions {
    /// Stride-1 "same" convolution for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(input + 2 * self.padding >= span, "convolution kernel larger than padded input");
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    opts: ConvOptions,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    /// Output columns `[lo, hi)` whose tap at offset `off` lands inside `[0, len)`.
    fn valid_range(&self, off: isize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.opts.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s }.min(out_len as isize);
        let hi = if (len as isize) - 1 - off < 0 {
            0
        } else {
            ((len as isize - 1 - off) / s + 1).min(out_len as isize)
        };
        (lo as usize, (hi.max(lo)) as usize)
    }
}

fn im2col<F: Scalar>(x: &[F], g: &Geometry, cols: &mut [F]) {
    let l = g.cols();
    let (s, p, d) = (g.opts.stride, g.opts.padding as isize, g.opts.dilation);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                let off_x = (kj * d) as isize - p;
                let (lo, hi) = g.valid_range(off_x, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * s + ki * d) as isize - p;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(F::zero());
                    drow[hi..].fill(F::zero());
                    if s == 1 {
                        let start = (lo as isize + off_x) as usize;
                        drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = src[(ox as isize * s as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Scalar>(cols: &[F], g: &Geometry, x: &mut [F]) {
    let l = g.cols();
    let (s, p, d) = (g.opts.stride, g.opts.padding as isize, g.opts.dilation);
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let srcrow = &cols[row * l..(row + 1) * l];
                let off_x = (kj * d) as isize - p;
                let (lo, hi) = g.valid_range(off_x, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * s + ki * d) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &srcrow[oy * g.wo..(oy + 1) * g.wo];
                    for ox in lo..hi {
                        dst[(ox as isize * s as isize + off_x) as usize] += src[ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of an NCHW input with an `(out, in, kh, kw)` kernel.
pub fn conv2d<'t, F: Scalar>(x: Var<'t, F>, weight: Var<'t, F>, bias: Option<Var<'t, F>>, opts: ConvOptions) -> Var<'t, F> {
    let xv = x.value();
    let wv = weight.value();
    let (n, c, h, w) = dims4(xv.shape());
    let wshape = wv.shape();
    assert_eq!(wshape.len(), 4, "conv weight must be 4-d");
    let (co, ci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    assert_eq!(ci, c, "conv2d: input has {c} channels, kernel expects {ci}");
    let geo = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        ho: opts.out_size(h, kh),
        wo: opts.out_size(w, kw),
        opts,
    };
    let (k, l) = (geo.rows(), geo.cols());
    let xs = xv.as_slice().expect("standard layout input");
    let wmat = ArrayView2::from_shape((co, k), wv.as_slice().unwrap()).unwrap();
    let mut out = ArrayD::<F>::zeros(IxDyn(&[n, co, geo.ho, geo.wo]));
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![F::zero(); k * l] };
    {
        let os = out.as_slice_mut().unwrap();
        for b in 0..n {
            let xb = &xs[b * c * h * w..(b + 1) * c * h * w];
            let colv = if geo.is_pointwise() {
                ArrayView2::from_shape((k, l), xb).unwrap()
            } else {
                im2col(xb, &geo, &mut cols);
                ArrayView2::from_shape((k, l), &cols[..]).unwrap()
            };
            let mut ob = ArrayViewMut2::from_shape((co, l), &mut os[b * co * l..(b + 1) * co * l]).unwrap();
            general_mat_mul(F::one(), &wmat, &colv, F::zero(), &mut ob);
        }
    }
    let mut parents = vec![x, weight];
    if let Some(bv) = bias {
        let bvals = bv.value();
        assert_eq!(bvals.len(), co, "conv2d: bias length");
        let os = out.as_slice_mut().unwrap();
        for b in 0..n {
            for (o, &bb) in bvals.iter().enumerate() {
                os[(b * co + o) * l..(b * co + o + 1) * l].iter_mut().for_each(|v| *v += bb);
            }
        }
        parents.push(bv);
    }
    let has_bias = bias.is_some();
    x.tape.push_op(out, &parents, move |g, needs| {
        let gs = g.as_slice().unwrap();
        let xs = xv.as_slice().unwrap();
        let wmat = ArrayView2::from_shape((co, k), wv.as_slice().unwrap()).unwrap();
        let mut dx = needs[0].then(|| ArrayD::<F>::zeros(IxDyn(&[n, c, h, w])));
        let mut dw = needs[1].then(|| ArrayD::<F>::zeros(IxDyn(&[co, ci, kh, kw])));
        let mut cols = vec![F::zero(); if geo.is_pointwise() { 0 } else { k * l }];
        let mut dcols = vec![F::zero(); if needs[0] && !geo.is_pointwise() { k * l } else { 0 }];
        for b in 0..n {
            let gb = ArrayView2::from_shape((co, l), &gs[b * co * l..(b + 1) * co * l]).unwrap();
            if let Some(dw) = dw.as_mut() {
                let xb = &xs[b * c * h * w..(b + 1) * c * h * w];
                let colv = if geo.is_pointwise() {
                    ArrayView2::from_shape((k, l), xb).unwrap()
                } else {
                    im2col(xb, &geo, &mut cols);
                    ArrayView2::from_shape((k, l), &cols[..]).unwrap()
                };
                let mut dwm = ArrayViewMut2::from_shape((co, k), dw.as_slice_mut().unwrap()).unwrap();
                general_mat_mul(F::one(), &gb, &colv.t(), F::one(), &mut dwm);
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx.as_slice_mut().unwrap()[b * c * h * w..(b + 1) * c * h * w];
                if geo.is_pointwise() {
                    let mut dxm = ArrayViewMut2::from_shape((k, l), dxb).unwrap();
                    general_mat_mul(F::one(), &wmat.t(), &gb, F::zero(), &mut dxm);
                } else {
                    let mut dcm = ArrayViewMut2::from_shape((k, l), &mut dcols[..]).unwrap();
                    general_mat_mul(F::one(), &wmat.t(), &gb, F::zero(), &mut dcm);
                    col2im(&dcols, &geo, dxb);
                }
            }
        }
        let mut res = vec![dx, dw];
        if has_bias {
            let db = needs[2].then(|| {
                let mut db = ArrayD::<F>::zeros(IxDyn(&[co]));
                for b in 0..n {
                    for o in 0..co {
                        db[o] += gs[(b * co + o) * l..(b * co + o + 1) * l].iter().copied().sum::<F>();
                    }
                }
                db
            });
            res.push(db);
        }
        res
    })
}

/// Max pooling over `k x k` windows with the given stride and padding.
pub fn max_pool2d<F: Scalar>(x: Var<'_, F>, kernel: usize, stride: usize, padding: usize) -> Var<'_, F> {
    let xv = x.value();
    let (n, c, h, w) = dims4(xv.shape());
    let opts = ConvOptions {
        stride,
        padding,
        dilation: 1,
    };
    let (ho, wo) = (opts.out_size(h, kernel), opts.out_size(w, kernel));
    let xs = xv.as_slice().unwrap();
    let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, ho, wo]));
    let mut arg = vec![0usize; n * c * ho * wo];
    let os = out.as_slice_mut().unwrap();
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = F::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if src[idx] > best || best_i == usize::MAX {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                os[o] = best;
                arg[o] = plane * h * w + best_i;
            }
        }
    }
    let arg = Rc::new(arg);
    x.tape.push_op(out, &[x], move |g, _| {
        let mut dx = ArrayD::<F>::zeros(IxDyn(&[n, c, h, w]));
        let ds = dx.as_slice_mut().unwrap();
        for (o, &gv) in g.iter().enumerate() {
            ds[arg[o]] += gv;
        }
        vec![Some(dx)]
    })
}

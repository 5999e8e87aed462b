use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{dims4, Scalar, Var};

impl<'t, F: Scalar> Var<'t, F> {
    pub fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = &*a + &*b;
        self.tape.push_op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t, F>) -> Var<'t, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = &*a - &*b;
        self.tape.push_op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.mapv(|v| -v))])
    }

    pub fn scale(self, s: F) -> Var<'t, F> {
        let out = &*self.value() * s;
        self.tape.push_op(out, &[self], move |g, _| vec![Some(g * s)])
    }

    pub fn add_scalar(self, s: F) -> Var<'t, F> {
        let out = &*self.value() + s;
        self.tape.push_op(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn relu(self) -> Var<'t, F> {
        let out = self.value().mapv(|v| if v > F::zero() { v } else { F::zero() });
        let mask = std::rc::Rc::new(out.mapv(|v| v > F::zero()));
        self.tape.push_op(out, &[self], move |g, _| {
            let mut d = g.clone();
            d.zip_mut_with(&mask, |d, &m| {
                if !m {
                    *d = F::zero()
                }
            });
            vec![Some(d)]
        })
    }

    pub fn abs(self) -> Var<'t, F> {
        let x = self.value();
        let out = x.mapv(|v| v.abs());
        self.tape.push_op(out, &[self], move |g, _| {
            let mut d = g.clone();
            d.zip_mut_with(&x, |d, &v| {
                *d = if v > F::zero() {
                    *d
                } else if v < F::zero() {
                    -*d
                } else {
                    F::zero()
                }
            });
            vec![Some(d)]
        })
    }

    /// Hard clamp; the gradient passes only where `lo <= x <= hi`.
    pub fn clamp(self, lo: F, hi: F) -> Var<'t, F> {
        let x = self.value();
        let out = x.mapv(|v| v.max(lo).min(hi));
        self.tape.push_op(out, &[self], move |g, _| {
            let mut d = g.clone();
            d.zip_mut_with(&x, |d, &v| {
                if v < lo || v > hi {
                    *d = F::zero()
                }
            });
            vec![Some(d)]
        })
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(self) -> Var<'t, F> {
        let x = self.value();
        let shape = x.raw_dim();
        let out = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.tape.push_op(out, &[self], move |g, _| {
            let gv = *g.iter().next().unwrap();
            vec![Some(ArrayD::from_elem(shape.clone(), gv))]
        })
    }

    /// `sum(w * x)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(self, w: std::rc::Rc<ArrayD<F>>) -> Var<'t, F> {
        let x = self.value();
        assert_eq!(x.shape(), w.shape(), "weighted_sum: shape mismatch");
        let total = x.iter().zip(w.iter()).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        self.tape.push_op(out, &[self], move |g, _| {
            let gv = *g.iter().next().unwrap();
            vec![Some(w.mapv(|v| v * gv))]
        })
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = self.value().len().max(1);
        self.sum().scale(F::one() / F::of(n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, F> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape.push_op(out, &[self], move |g, _| {
            let d = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&in_shape))
                .unwrap();
            vec![Some(d)]
        })
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, F> {
        let x = self.value();
        let out = x.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.push_op(out, &[self], move |g, _| {
            vec![Some(g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned())]
        })
    }

    /// Zero-pads the last two axes of an NCHW tensor on the bottom and right.
    pub fn pad_bottom_right(self, pad_h: usize, pad_w: usize) -> Var<'t, F> {
        if pad_h == 0 && pad_w == 0 {
            return self;
        }
        let x = self.value();
        let (n, c, h, w) = dims4(x.shape());
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h + pad_h, w + pad_w]));
        out.slice_each_axis_mut(|ax| match ax.axis.index() {
            2 => Slice::from(0..h),
            3 => Slice::from(0..w),
            _ => Slice::from(..),
        })
        .assign(&*x);
        self.tape.push_op(out, &[self], move |g, _| {
            let d = g
                .slice_each_axis(|ax| match ax.axis.index() {
                    2 => Slice::from(0..h),
                    3 => Slice::from(0..w),
                    _ => Slice::from(..),
                })
                .to_owned();
            vec![Some(d)]
        })
    }

    /// Keeps the top-left `h x w` corner of an NCHW tensor.
    pub fn crop_top_left(self, h: usize, w: usize) -> Var<'t, F> {
        let x = self.value();
        let (n, c, hi, wi) = dims4(x.shape());
        if h == hi && w == wi {
            return self;
        }
        assert!(h <= hi && w <= wi, "crop larger than input");
        let out = x
            .slice_each_axis(|ax| match ax.axis.index() {
                2 => Slice::from(0..h),
                3 => Slice::from(0..w),
                _ => Slice::from(..),
            })
            .to_owned();
        self.tape.push_op(out, &[self], move |g, _| {
            let mut d = ArrayD::zeros(IxDyn(&[n, c, hi, wi]));
            d.slice_each_axis_mut(|ax| match ax.axis.index() {
                2 => Slice::from(0..h),
                3 => Slice::from(0..w),
                _ => Slice::from(..),
            })
            .assign(g);
            vec![Some(d)]
        })
    }

    /// Channel slice `[start, end)` of an NCHW tensor.
    pub fn narrow_channels(self, start: usize, end: usize) -> Var<'t, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = x.slice_axis(Axis(1), Slice::from(start..end)).to_owned();
        self.tape.push_op(out, &[self], move |g, _| {
            let mut d = ArrayD::zeros(IxDyn(&shape));
            d.slice_axis_mut(Axis(1), Slice::from(start..end)).assign(g);
            vec![Some(d)]
        })
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'t, F: Scalar>(vars: &[Var<'t, F>], axis: usize) -> Var<'t, F> {
    assert!(!vars.is_empty(), "concat of nothing");
    if vars.len() == 1 {
        return vars[0];
    }
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    vars[0].tape.push_op(out, vars, move |g, needs| {
        let mut start = 0;
        sizes
            .iter()
            .zip(needs)
            .map(|(&len, &need)| {
                let piece = need.then(|| g.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned());
                start += len;
                piece
            })
            .collect()
    })
}

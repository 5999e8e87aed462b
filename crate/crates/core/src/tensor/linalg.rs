use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

use super::{Scalar, Var};

fn mat<F: Scalar>(data: &[F], rows: usize, cols: usize, transpose: bool) -> ArrayView2<'_, F> {
    let v = ArrayView2::from_shape((rows, cols), data).unwrap();
    if transpose {
        v.reversed_axes()
    } else {
        v
    }
}

/// Batched product of `(B, ., .)` tensors, optionally transposing either
/// operand's trailing two axes: `out[b] = op(a[b]) * op(b[b])`.
pub fn batch_matmul<'t, F: Scalar>(a: Var<'t, F>, b: Var<'t, F>, trans_a: bool, trans_b: bool) -> Var<'t, F> {
    let (av, bv) = (a.value(), b.value());
    let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
    assert!(sa.len() == 3 && sb.len() == 3, "batch_matmul expects 3-d operands");
    assert_eq!(sa[0], sb[0], "batch_matmul: batch mismatch");
    let batch = sa[0];
    let (m, ka) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    assert_eq!(ka, kb, "batch_matmul: inner dimension mismatch {sa:?} x {sb:?}");
    let k = ka;
    let mut out = ArrayD::<F>::zeros(IxDyn(&[batch, m, n]));
    {
        let (asl, bsl) = (av.as_slice().unwrap(), bv.as_slice().unwrap());
        let os = out.as_slice_mut().unwrap();
        for i in 0..batch {
            let am = mat(&asl[i * m * k..(i + 1) * m * k], sa[1], sa[2], trans_a);
            let bm = mat(&bsl[i * k * n..(i + 1) * k * n], sb[1], sb[2], trans_b);
            let mut om = ArrayViewMut2::from_shape((m, n), &mut os[i * m * n..(i + 1) * m * n]).unwrap();
            general_mat_mul(F::one(), &am, &bm, F::zero(), &mut om);
        }
    }
    a.tape.push_op(out, &[a, b], move |g, needs| {
        let gs = g.as_slice().unwrap();
        let (asl, bsl) = (av.as_slice().unwrap(), bv.as_slice().unwrap());
        let mut da = needs[0].then(|| ArrayD::<F>::zeros(IxDyn(&sa)));
        let mut db = needs[1].then(|| ArrayD::<F>::zeros(IxDyn(&sb)));
        for i in 0..batch {
            let gm = ArrayView2::from_shape((m, n), &gs[i * m * n..(i + 1) * m * n]).unwrap();
            let am = mat(&asl[i * m * k..(i + 1) * m * k], sa[1], sa[2], trans_a);
            let bm = mat(&bsl[i * k * n..(i + 1) * k * n], sb[1], sb[2], trans_b);
            if let Some(da) = da.as_mut() {
                // d op(A) = G op(B)^T; store transposed when A was used transposed.
                let slot = &mut da.as_slice_mut().unwrap()[i * m * k..(i + 1) * m * k];
                let mut dm = ArrayViewMut2::from_shape((sa[1], sa[2]), slot).unwrap();
                if trans_a {
                    general_mat_mul(F::one(), &bm, &gm.t(), F::zero(), &mut dm);
                } else {
                    general_mat_mul(F::one(), &gm, &bm.t(), F::zero(), &mut dm);
                }
            }
            if let Some(db) = db.as_mut() {
                let slot = &mut db.as_slice_mut().unwrap()[i * k * n..(i + 1) * k * n];
                let mut dm = ArrayViewMut2::from_shape((sb[1], sb[2]), slot).unwrap();
                if trans_b {
                    general_mat_mul(F::one(), &gm.t(), &am, F::zero(), &mut dm);
                } else {
                    general_mat_mul(F::one(), &am.t(), &gm, F::zero(), &mut dm);
                }
            }
        }
        vec![da, db]
    })
}

/// Softmax over the last axis, computed with max subtraction.
pub fn softmax_last<F: Scalar>(x: Var<'_, F>) -> Var<'_, F> {
    let xv = x.value();
    let last = xv.ndim() - 1;
    let mut out = xv.as_standard_layout().into_owned();
    for mut row in out.lanes_mut(Axis(last)) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / total);
    }
    let y = std::rc::Rc::new(out.clone());
    x.tape.push_op(out, &[x], move |g, _| {
        let mut dx = g.as_standard_layout().into_owned();
        for (mut drow, yrow) in dx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
            let dot: F = drow.iter().zip(yrow.iter()).map(|(&d, &p)| d * p).sum();
            drow.zip_mut_with(&yrow, |d, &p| *d = p * (*d - dot));
        }
        vec![Some(dx)]
    })
}

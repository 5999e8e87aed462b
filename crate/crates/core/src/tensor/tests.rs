use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::*;
use crate::nn::ParamStore;
use crate::training::gradcheck::{check_gradients, GradcheckOptions};

fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-1.0, 1.0).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || u.sample(&mut rng))
}

fn all_entries() -> GradcheckOptions {
    GradcheckOptions {
        max_entries: usize::MAX,
        ..GradcheckOptions::for_precision::<f64>()
    }
}

/// Weighted sum so that every output element carries a distinct sensitivity.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let w = y.tape().constant(random(&y.shape(), seed));
    let prod = batch_matmul(
        y.reshape(&[1, 1, y.value().len()]),
        w.reshape(&[1, w.value().len(), 1]),
        false,
        false,
    );
    prod.sum()
}

fn check(inputs: Vec<ArrayD<f64>>, f: impl for<'t, 'p> Fn(&[Var<'t, f64>]) -> Var<'t, f64>) {
    let mut store = ParamStore::new();
    let mut inputs = inputs;
    let report = check_gradients(&mut store, &mut inputs, |_, x| probe(f(x), 99), all_entries());
    assert!(report.passed(), "{report:?}");
}

#[test]
fn conv_variants() {
    for (k, opts) in [
        (3, ConvOptions { stride: 1, padding: 1, dilation: 1 }),
        (3, ConvOptions { stride: 2, padding: 1, dilation: 1 }),
        (3, ConvOptions { stride: 1, padding: 2, dilation: 2 }),
        (1, ConvOptions { stride: 2, padding: 0, dilation: 1 }),
        (1, ConvOptions::default()),
    ] {
        check(vec![random(&[2, 3, 7, 6], 1), random(&[4, 3, k, k], 2), random(&[4], 3)], |x| {
            conv2d(x[0], x[1], Some(x[2]), opts)
        });
    }
}

#[test]
fn conv_matches_direct_sum() {
    let tape = Tape::<f64>::new();
    let x = random(&[1, 2, 6, 5], 4);
    let w = random(&[3, 2, 3, 3], 5);
    let opts = ConvOptions { stride: 2, padding: 2, dilation: 2 };
    let y = conv2d(tape.constant(x.clone()), tape.constant(w.clone()), None, opts).value();
    let (ho, wo) = (opts.out_size(6, 3), opts.out_size(5, 3));
    assert_eq!(y.shape(), &[1, 3, ho, wo]);
    for o in 0..3 {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let iy = (oy * 2 + ki * 2) as isize - 2;
                            let ix = (ox * 2 + kj * 2) as isize - 2;
                            if iy >= 0 && iy < 6 && ix >= 0 && ix < 5 {
                                acc += w[[o, c, ki, kj]] * x[[0, c, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
                assert!((acc - y[[0, o, oy, ox]]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn group_norm_gradients_and_statistics() {
    check(vec![random(&[2, 4, 3, 3], 6), random(&[4], 7), random(&[4], 8)], |x| {
        group_norm(x[0], x[1], x[2], 2, 1e-5)
    });
    let tape = Tape::<f64>::new();
    let x = random(&[1, 4, 8, 8], 9).mapv(|v| 3.0 * v + 1.0);
    let y = group_norm(
        tape.constant(x),
        tape.constant(ArrayD::ones(IxDyn(&[4]))),
        tape.constant(ArrayD::zeros(IxDyn(&[4]))),
        2,
        1e-5,
    )
    .value();
    for g in 0..2 {
        let seg: Vec<f64> = y.as_slice().unwrap()[g * 128..(g + 1) * 128].to_vec();
        let mean = seg.iter().sum::<f64>() / 128.0;
        let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn elementwise_and_shape_ops() {
    check(vec![random(&[2, 3, 4, 5], 10), random(&[2, 3, 4, 5], 11)], |x| {
        let s = x[0].add(x[1]).sub(x[1].scale(0.5)).relu().add_scalar(0.1);
        let p = s.permute(&[0, 2, 3, 1]).reshape(&[2, 20, 3]).permute(&[0, 2, 1]).reshape(&[2, 3, 4, 5]);
        let c = concat(&[p, x[0].abs()], 1).narrow_channels(1, 5);
        c.pad_bottom_right(2, 1).crop_top_left(3, 5).clamp(-0.5, 0.7)
    });
}

#[test]
fn matmul_and_softmax() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        check(vec![random(&sa, 12), random(&sb, 13)], move |x| batch_matmul(x[0], x[1], ta, tb));
    }
    check(vec![random(&[2, 3, 6], 14).mapv(|v| 4.0 * v)], |x| softmax_last(x[0]));
}

#[test]
fn resampling_ops() {
    check(vec![random(&[1, 2, 5, 7], 15)], |x| x[0].resize_bilinear(9, 4));
    check(vec![random(&[1, 2, 5, 7], 16)], |x| x[0].resize_nearest(3, 11));
    check(vec![random(&[1, 2, 6, 7], 17)], |x| x[0].blur5().decimate2().zero_insert2(6, 7));
    check(vec![random(&[1, 2, 7, 6], 18)], |x| max_pool2d(x[0], 3, 2, 1));
}

#[test]
fn bilinear_upsample_of_constant_is_constant() {
    let tape = Tape::<f64>::new();
    let y = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 0.3)).resize_bilinear(8, 8).value();
    assert!(y.iter().all(|v| (v - 0.3).abs() < 1e-12));
}

#[test]
fn loss_ops_gradients() {
    let labels = std::rc::Rc::new(vec![0u8, 1, 2, 2, 1, 0, 1, 1]);
    for gamma in [0.0, 2.0] {
        let l = labels.clone();
        check(vec![random(&[2, 3, 2, 2], 19).mapv(|v| 3.0 * v)], move |x| {
            focal_cross_entropy(x[0], l.clone(), gamma)
        });
    }
    let target = std::rc::Rc::new(random(&[1, 1, 4, 4], 20));
    let mask = std::rc::Rc::new((0..16).map(|i| i % 3 != 0).collect::<Vec<_>>());
    check(vec![random(&[1, 1, 4, 4], 21)], move |x| masked_charbonnier(x[0], target.clone(), mask.clone(), 1e-6));
}

use std::collections::BTreeMap;

use dcam_core::config::{Ablation, GuidanceMode, ModelConfig, Widths};
use dcam_core::error::DcamError;
use dcam_core::losses::{total_loss, LossTargets};
use dcam_core::model::{param_count, Dcam};
use dcam_core::nn::{init_rng, Builder, Conv2d, Ctx, ParamStore};
use dcam_core::tensor::{group_norm, Tape};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(lo..hi) as f32)
}

fn narrow(mode: GuidanceMode) -> ModelConfig {
    ModelConfig {
        width_multiplier: 1.0 / 16.0,
        ..ModelConfig::full(mode)
    }
}

#[test]
fn stride_ladder_at_64() {
    for mode in [GuidanceMode::Click, GuidanceMode::Trimap, GuidanceMode::None] {
        let cfg = ModelConfig::tiny(mode);
        let (model, params) = Dcam::init::<f32>(&cfg, 0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, false);
        let x = tape.constant(uniform(&[2, 3, 64, 64], 1, 0.0, 1.0));
        let g = tape.constant(ArrayD::zeros(IxDyn(&[2, 3, 64, 64])));
        let (pack, p_s) = model.backbone.forward(&ctx, x, g).unwrap();
        let w = cfg.widths();
        assert_eq!(pack.stem.shape(), vec![2, w.stem_out, 32, 32]);
        assert_eq!(pack.f1.shape(), vec![2, w.stage_out[0], 16, 16]);
        assert_eq!(pack.f2.shape(), vec![2, w.stage_out[1], 8, 8]);
        assert_eq!(pack.f3.shape(), vec![2, w.stage_out[2], 4, 4]);
        assert_eq!(pack.fc.shape(), vec![2, w.context, 4, 4]);
        assert_eq!(p_s.shape(), vec![2, mode.aux_channels(), 4, 4]);
        let pred = model.forward(&ctx, x, g).unwrap();
        assert_eq!(pred.alpha.shape(), vec![2, 1, 64, 64]);
        assert_eq!(pred.p_m.shape(), vec![2, mode.aux_channels(), 32, 32]);
        assert_eq!(pred.p_d.shape(), vec![2, mode.aux_channels(), 8, 8]);
    }
}

#[test]
fn indivisible_input_is_a_shape_error() {
    let (model, params) = Dcam::init::<f32>(&narrow(GuidanceMode::Click), 0).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &params, false);
    let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 48, 64])));
    assert!(matches!(model.forward(&ctx, x, x), Err(DcamError::Shape(_))));
}

#[test]
fn zero_head_weights_expose_the_bias() {
    let cfg = ModelConfig::tiny(GuidanceMode::Click);
    let (model, mut params) = Dcam::init::<f32>(&cfg, 0).unwrap();
    let out = &model.backbone.head.out;
    params.get_mut(out.weight).fill(0.0);
    *params.get_mut(out.bias.unwrap()) = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -0.2, 0.1]).unwrap();
    let alpha = &model.decoder.alpha_head.out;
    params.get_mut(alpha.weight).fill(0.0);
    params.get_mut(alpha.bias.unwrap()).fill(0.5);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &params, false);
    let zero = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 64, 64])));
    let pred = model.forward(&ctx, zero, zero).unwrap();
    let p_s = pred.p_s.value();
    for (c, b) in [0.3f32, -0.2, 0.1].iter().enumerate() {
        assert!(p_s.index_axis(ndarray::Axis(1), c).iter().all(|v| v == b));
    }
    assert!(pred.alpha.value().iter().all(|&v| v == 0.5));
}

#[test]
fn alpha_stays_in_range_over_random_inputs() {
    let cfg = ModelConfig::tiny(GuidanceMode::Trimap);
    let (model, mut params) = Dcam::init::<f32>(&cfg, 5).unwrap();
    // Larger output weights so the clamp is exercised on both sides.
    let out = &model.decoder.alpha_head.out;
    params.get_mut(out.weight).mapv_inplace(|v| v * 200.0);
    let (mut low, mut high) = (0, 0);
    for i in 0..100 {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, false);
        let x = tape.constant(uniform(&[1, 3, 32, 32], i, -2.0, 3.0));
        let g = tape.constant(uniform(&[1, 3, 32, 32], i + 1000, 0.0, 1.0));
        let a = model.forward(&ctx, x, g).unwrap().alpha.value();
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        low += a.iter().filter(|&&v| v == 0.0).count();
        high += a.iter().filter(|&&v| v == 1.0).count();
    }
    assert!(low > 0 && high > 0);
}

#[test]
fn output_matches_input_size_for_every_stride_multiple() {
    let cfg = narrow(GuidanceMode::None);
    let (model, params) = Dcam::init::<f32>(&cfg, 0).unwrap();
    for h in (32..=256).step_by(32) {
        for w in (32..=256).step_by(32) {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &params, false);
            let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 3, h, w]), 0.5));
            let g = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, h, w])));
            let pred = model.forward(&ctx, x, g).unwrap();
            assert_eq!(pred.alpha.shape(), vec![1, 1, h, w]);
        }
    }
}

#[test]
fn group_norm_standardises_each_group() {
    let x = uniform(&[2, 8, 5, 6], 3, -4.0, 9.0).mapv(f64::from);
    let tape = Tape::<f64>::new();
    let y = group_norm(
        tape.constant(x),
        tape.constant(ArrayD::ones(IxDyn(&[8]))),
        tape.constant(ArrayD::zeros(IxDyn(&[8]))),
        4,
        1e-5,
    )
    .value();
    for n in 0..2 {
        for g in 0..4 {
            let vals: Vec<f64> = (2 * g..2 * g + 2)
                .flat_map(|c| y.slice(ndarray::s![n, c, .., ..]).iter().cloned().collect::<Vec<_>>())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

fn conv(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cout * cin * k * k + if bias { cout } else { 0 }
}

fn gn(c: usize) -> usize {
    2 * c
}

fn head(cin: usize, out: usize) -> usize {
    let mid = (cin / 2).max(8);
    conv(cin, mid, 3, true) + conv(mid, out, 3, true)
}

fn fusion(cin: usize, cout: usize) -> usize {
    conv(cin, cout, 1, false) + gn(cout) + 2 * (conv(cout, cout, 3, false) + gn(cout))
}

/// Layer-by-layer count of the full-topology network at a given width.
fn hand_count(cfg: &ModelConfig) -> usize {
    let w = Widths::new(cfg.width_multiplier);
    let aux = cfg.guidance_mode.aux_channels();
    let mut n = 0;
    n += conv(6, w.stem_mid, 3, false) + gn(w.stem_mid);
    n += conv(w.stem_mid, w.stem_mid, 3, false) + gn(w.stem_mid);
    n += conv(w.stem_mid, w.stem_out, 3, false) + gn(w.stem_out);
    let mut cin = w.stem_out;
    for (i, blocks) in [3, 4, 6, 3].into_iter().enumerate() {
        let (m, o) = (w.stage_mid[i], w.stage_out[i]);
        for b in 0..blocks {
            let c = if b == 0 { cin } else { o };
            n += conv(c, m, 1, false) + gn(m) + conv(m, m, 3, false) + gn(m) + conv(m, o, 1, false) + gn(o);
            if b == 0 {
                n += conv(c, o, 1, false) + gn(o);
            }
        }
        cin = o;
    }
    let c = w.context;
    n += conv(w.stage_out[3], c, 1, false) + gn(c);
    n += head(c, aux);
    let qk = (c / 2).max(8);
    n += conv(3, c, 1, true) + conv(c, c, 1, true);
    for _ in 0..2 {
        n += conv(c + w.stage_out[2], c, 1, true) + 2 * conv(c, qk, 1, true) + 2 * conv(c, c, 1, true);
        n += conv(c + w.stage_out[1], c, 1, true) + 2 * conv(c, qk, 1, true) + conv(c, c, 1, true);
        n += 2 * conv(c, c, 3, true) + conv(c, c, 1, true) + conv(c, c, 1, true);
    }
    n += head(c, aux);
    n += fusion(c + w.stage_out[2], w.dec_semantic);
    n += fusion(w.dec_semantic + w.stage_out[1], w.dec_appearance);
    n += fusion(w.dec_appearance + w.stage_out[0], w.dec_quarter);
    n += conv(w.dec_quarter + w.stem_out, w.dec_matte, 3, false) + gn(w.dec_matte);
    n += head(w.dec_matte, aux);
    n += conv(w.dec_matte + 3, w.dec_final, 3, true) + conv(w.dec_final, 1, 3, true);
    n
}

#[test]
fn parameter_counts() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = init_rng(0);
    Conv2d::pointwise(&mut Builder::new(&mut store, &mut rng), "c", 4, 8, true);
    assert_eq!(store.num_scalars(), 40);

    for mode in [GuidanceMode::Click, GuidanceMode::Trimap] {
        let tiny = ModelConfig::tiny(mode);
        assert_eq!(param_count(&tiny).unwrap(), hand_count(&tiny));
    }
    let full = param_count(&ModelConfig::full(GuidanceMode::Trimap)).unwrap() as f64;
    assert!((full / 45.6e6 - 1.0).abs() <= 0.2, "{full}");
    assert!(param_count(&ModelConfig::ablation(Ablation::B1, GuidanceMode::Click, 0.25)).unwrap() < hand_count(&ModelConfig::tiny(GuidanceMode::Click)));
}

/// Module path used to group parameters, e.g. `aggregation.round0.goa`.
fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let depth = if parts[0] == "aggregation" && parts.len() > 3 { 3 } else { 2 };
    parts[..depth.min(parts.len() - 1)].join(".")
}

#[test]
fn every_parameter_group_receives_gradient() {
    for mode in [GuidanceMode::Click, GuidanceMode::Trimap] {
        let cfg = ModelConfig::tiny(mode);
        let (model, params) = Dcam::init::<f32>(&cfg, 1).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, true);
        let image = uniform(&[2, 3, 64, 64], 2, 0.0, 1.0);
        let alpha = uniform(&[2, 1, 64, 64], 3, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trimap = Array3::from_shape_simple_fn((2, 64, 64), || rng.random_range(0..3u8));
        let guide = uniform(&[2, 3, 64, 64], 5, 0.0, 1.0).mapv(|v| (v > 0.8) as u8 as f32);
        let pred = model.forward(&ctx, tape.constant(image), tape.constant(guide)).unwrap();
        let (loss, _) = total_loss(&pred, &LossTargets { alpha, trimap }, &cfg).unwrap();
        let mut grads = tape.backward(loss);
        let grads = ctx.param_grads(&mut grads);
        let mut norms: BTreeMap<String, f64> = BTreeMap::new();
        for id in params.ids() {
            let g = grads[id.0].as_ref().map_or(0.0, |g| g.iter().map(|v| (*v as f64).powi(2)).sum());
            *norms.entry(group_of(params.name(id))).or_default() += g;
        }
        assert!(norms.len() > 15);
        for (group, n) in &norms {
            assert!(*n > 0.0, "{mode:?}: no gradient reaches {group}");
        }
    }
}

//! Central finite-difference verification of reverse-mode gradients.

use std::rc::Rc;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::aggregation::{GlobalObjectAggregator, GuidanceEmbedding, LocalAppearanceAggregator};
use crate::backbone::{DeepStem, FeaturePack, ResidualStage, INPUT_CHANNELS};
use crate::config::{GoaVariant, GuidanceMode, LaaVariant, ModelConfig};
use crate::decoder::Decoder;
use crate::error::{DcamError, Result};
use crate::losses::{charbonnier_unknown, focal_ce, laplacian_pyramid_loss, LossTargets};
use crate::model::Dcam;
use crate::nn::{init_rng, Builder, Conv2d, Ctx, ParamId, ParamStore};
use crate::tensor::{concat, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Entries sampled per tensor; `usize::MAX` checks every entry.
    pub max_entries: usize,
    pub seed: u64,
}

impl GradcheckOptions {
    /// Step 1e-4 with tolerance 1e-3 (double) or 1e-2 (single precision).
    pub fn for_precision<F: Scalar>() -> Self {
        let double = std::mem::size_of::<F>() == 8;
        Self {
            step: 1e-4,
            tolerance: if double { 1e-3 } else { 1e-2 },
            max_entries: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Tensor holding the worst entry.
    pub worst: String,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

/// Elementwise relative error, with a floor of 1e-3 of the largest
/// derivative in the whole check so that entries negligible on that scale
/// (such as exact zeros from shift invariances) are judged absolutely.
fn relative_errors(analytic: &[f64], numeric: &[f64], scale: f64) -> f64 {
    let floor = 1e-3 * scale + 1e-12;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

enum Target {
    Param(ParamId),
    Input(usize),
}

/// Checks d(probe)/d(every parameter and input) against central differences.
///
/// `probe` builds the forward pass from the context and input variables and
/// returns a scalar. Parameters are perturbed in place and restored.
pub fn check_gradients<F, P>(params: &mut ParamStore<F>, inputs: &mut [ArrayD<F>], probe: P, opts: GradcheckOptions) -> GradcheckReport
where
    F: Scalar,
    P: for<'t, 'p> Fn(&Ctx<'t, 'p, F>, &[Var<'t, F>]) -> Var<'t, F>,
{
    // Analytic pass.
    let (param_grads, input_grads) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, true);
        let vars: Vec<_> = inputs.iter().map(|x| tape.input(x.clone(), true)).collect();
        let out = probe(&ctx, &vars);
        let mut grads = tape.backward(out);
        let ig: Vec<_> = vars.iter().map(|&v| grads.take(v)).collect();
        (ctx.param_grads(&mut grads), ig)
    };

    let eval = |params: &ParamStore<F>, inputs: &[ArrayD<F>]| -> f64 {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, false);
        let vars: Vec<_> = inputs.iter().map(|x| tape.input(x.clone(), false)).collect();
        probe(&ctx, &vars).value().iter().map(|v| v.as_f64()).sum()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut targets: Vec<(Target, String, usize)> = Vec::new();
    for id in params.ids() {
        targets.push((Target::Param(id), params.name(id).to_string(), params.get(id).len()));
    }
    for (i, x) in inputs.iter().enumerate() {
        targets.push((Target::Input(i), format!("input[{i}]"), x.len()));
    }

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        entries_checked: 0,
        tolerance: opts.tolerance,
    };
    let h = F::of(opts.step);
    let mut checked = Vec::new();
    for (target, name, len) in targets {
        let grad = match &target {
            Target::Param(id) => param_grads[id.0].as_ref(),
            Target::Input(i) => input_grads[*i].as_ref(),
        };
        let picks: Vec<usize> = if len <= opts.max_entries {
            (0..len).collect()
        } else {
            sample(&mut rng, len, opts.max_entries).into_vec()
        };
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &k in &picks {
            let a = grad.map(|g| g.as_slice().unwrap()[k].as_f64()).unwrap_or(0.0);
            let original = match &target {
                Target::Param(id) => params.get(*id).as_slice().unwrap()[k],
                Target::Input(i) => inputs[*i].as_slice().unwrap()[k],
            };
            let (hi, lo) = (original + h, original - h);
            let set = |params: &mut ParamStore<F>, inputs: &mut [ArrayD<F>], v: F| match &target {
                Target::Param(id) => params.get_mut(*id).as_slice_mut().unwrap()[k] = v,
                Target::Input(i) => inputs[*i].as_slice_mut().unwrap()[k] = v,
            };
            set(params, inputs, hi);
            let f_hi = eval(params, inputs);
            set(params, inputs, lo);
            let f_lo = eval(params, inputs);
            set(params, inputs, original);
            analytic.push(a);
            numeric.push((f_hi - f_lo) / (hi - lo).as_f64());
        }
        report.entries_checked += picks.len();
        checked.push((name, analytic, numeric));
    }
    let scale = checked
        .iter()
        .flat_map(|(_, a, n)| a.iter().chain(n))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for (name, analytic, numeric) in checked {
        let err = relative_errors(&analytic, &numeric, scale);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst = name;
        }
    }
    report
}

/// Module classes covered by [`run_case`].
pub const MODULE_CASES: [&str; 10] = [
    "conv1x1",
    "stem",
    "residual_stage",
    "guidance_embedding",
    "goa",
    "laa",
    "decoder",
    "focal_ce",
    "charbonnier",
    "laplacian",
];

fn uniform<F: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let u = Uniform::new(lo, hi).expect("valid range");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::of(u.sample(rng)))
}

/// Fixed random projection turning an output into a scalar probe, so that
/// normalised outputs do not sum to a constant.
fn projector<F: Scalar>(shape: &[usize], seed: u64) -> Rc<ArrayD<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    Rc::new(uniform(shape, -1.0, 1.0, &mut rng))
}

/// Narrow widths used for module-level checks.
pub fn gradcheck_config(mode: GuidanceMode) -> ModelConfig {
    ModelConfig {
        width_multiplier: 1.0 / 16.0,
        ..ModelConfig::full(mode)
    }
}

fn checked<F: Scalar>(
    store: &mut ParamStore<F>,
    inputs: &mut [ArrayD<F>],
    out_shape: Option<&[usize]>,
    opts: GradcheckOptions,
    f: impl for<'t, 'p> Fn(&Ctx<'t, 'p, F>, &[Var<'t, F>]) -> Var<'t, F>,
) -> GradcheckReport {
    match out_shape {
        Some(shape) => {
            let w = projector::<F>(shape, opts.seed);
            check_gradients(store, inputs, move |ctx, x| f(ctx, x).weighted_sum(w.clone()), opts)
        }
        None => check_gradients(store, inputs, f, opts),
    }
}

/// Output shape of a probe, from one untracked evaluation.
fn probe_shape<F: Scalar>(
    store: &ParamStore<F>,
    inputs: &[ArrayD<F>],
    f: &impl for<'t, 'p> Fn(&Ctx<'t, 'p, F>, &[Var<'t, F>]) -> Var<'t, F>,
) -> Vec<usize> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, false);
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    f(&ctx, &vars).shape()
}

fn module_check<F: Scalar>(
    mut store: ParamStore<F>,
    mut inputs: Vec<ArrayD<F>>,
    opts: GradcheckOptions,
    f: impl for<'t, 'p> Fn(&Ctx<'t, 'p, F>, &[Var<'t, F>]) -> Var<'t, F>,
) -> GradcheckReport {
    let shape = probe_shape(&store, &inputs, &f);
    checked(&mut store, &mut inputs, Some(&shape), opts, f)
}

/// Runs the named check on small inputs (at most 32x32).
pub fn run_case<F: Scalar>(name: &str, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(17));
    let cfg = gradcheck_config(GuidanceMode::Click);
    let w = cfg.widths();
    let mut store = ParamStore::<F>::new();
    let mut init = init_rng(opts.seed);
    let mut b = Builder::new(&mut store, &mut init);
    let report = match name {
        "conv1x1" => {
            let conv = Conv2d::pointwise(&mut b, "conv", 4, 8, true);
            let x = uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);
            module_check(store, vec![x], opts, move |ctx, x| conv.forward(ctx, x[0]))
        }
        "stem" => {
            let stem = DeepStem::new(&mut b, INPUT_CHANNELS, w.stem_mid, w.stem_out);
            let x = uniform(&[1, INPUT_CHANNELS, 16, 16], -1.0, 1.0, &mut rng);
            module_check(store, vec![x], opts, move |ctx, x| stem.forward(ctx, x[0]))
        }
        "residual_stage" => {
            let stage = ResidualStage::new(&mut b, "stage", 8, 8, 16, 2, 2, 1);
            let x = uniform(&[1, 8, 8, 8], -1.0, 1.0, &mut rng);
            module_check(store, vec![x], opts, move |ctx, x| stage.forward(ctx, x[0]))
        }
        "guidance_embedding" => {
            let gem = GuidanceEmbedding::new(&mut b, 3, w.context, w.context);
            let g = uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
            let fc = uniform(&[1, w.context, 2, 2], -1.0, 1.0, &mut rng);
            module_check(store, vec![g, fc], opts, move |ctx, x| gem.forward(ctx, x[0], x[1]).expect("shapes agree"))
        }
        "goa" => {
            let goa = GlobalObjectAggregator::new(&mut b, "goa", 8, 8, GoaVariant::ObjectSemantics, 4096);
            let f_obj = uniform(&[1, 8, 2, 2], -1.0, 1.0, &mut rng);
            let f_s = uniform(&[1, 8, 2, 2], -1.0, 1.0, &mut rng);
            module_check(store, vec![f_obj, f_s], opts, move |ctx, x| goa.forward(ctx, x[0], x[1]).expect("within cap").output)
        }
        "laa" => {
            let laa = LocalAppearanceAggregator::new(&mut b, "laa", 8, 8, LaaVariant::Hybrid, 7);
            let f_in = uniform(&[1, 8, 5, 5], -1.0, 1.0, &mut rng);
            let f2 = uniform(&[1, 8, 10, 10], -1.0, 1.0, &mut rng);
            module_check(store, vec![f_in, f2], opts, move |ctx, x| laa.forward(ctx, x[0], x[1]).expect("valid window").output)
        }
        "decoder" => {
            let dec = Decoder::new(&mut b, &cfg);
            let shapes: [&[usize]; 7] = [
                &[1, w.stem_out, 16, 16],
                &[1, w.stage_out[0], 8, 8],
                &[1, w.stage_out[1], 4, 4],
                &[1, w.stage_out[2], 2, 2],
                &[1, w.context, 2, 2],
                &[1, w.context, 4, 4],
                &[1, 3, 32, 32],
            ];
            let inputs = shapes.iter().map(|s| uniform(s, 0.0, 1.0, &mut rng)).collect();
            module_check(store, inputs, opts, move |ctx, x| {
                let pack = FeaturePack {
                    stem: x[0],
                    f1: x[1],
                    f2: x[2],
                    f3: x[3],
                    fc: x[4],
                };
                let out = dec.forward(ctx, &pack, x[5], x[6]).expect("consistent shapes");
                concat(&[out.alpha.reshape(&[1, 1024]), out.p_m.reshape(&[1, 768])], 1)
            })
        }
        "focal_ce" => {
            let logits = uniform(&[2, 3, 8, 8], -3.0, 3.0, &mut rng);
            let trimap = Array3::from_shape_simple_fn((2, 16, 16), || rng.random_range(0..3u8));
            checked(&mut store, &mut [logits], None, opts, move |_, x| {
                focal_ce(x[0], &trimap, 2.0).expect("finite logits")
            })
        }
        "charbonnier" => {
            let pred = uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
            let targets = LossTargets {
                alpha: uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut rng),
                trimap: Array3::from_shape_simple_fn((2, 16, 16), || rng.random_range(0..3u8)),
            };
            checked(&mut store, &mut [pred], None, opts, move |_, x| {
                charbonnier_unknown(x[0], &targets, 1e-6).expect("valid shapes").0
            })
        }
        "laplacian" => {
            let pred = uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut rng);
            let gt = uniform::<F>(&[1, 1, 32, 32], 0.0, 1.0, &mut rng);
            checked(&mut store, &mut [pred], None, opts, move |_, x| {
                laplacian_pyramid_loss(x[0], &gt, 4).expect("large enough")
            })
        }
        other => {
            return Err(DcamError::Config(format!(
                "unknown gradcheck module {other:?}; expected one of {}",
                MODULE_CASES.join(", ")
            )))
        }
    };
    Ok(report)
}

/// Checks the assembled network end to end on a 32x32 input.
pub fn run_model_case<F: Scalar>(cfg: &ModelConfig, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(29));
    let (model, store) = Dcam::init::<F>(cfg, opts.seed)?;
    let image = uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let guidance = uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let ch = cfg.guidance_mode.aux_channels();
    Ok(module_check(store, vec![image, guidance], opts, move |ctx, x| {
        let p = model.forward(ctx, x[0], x[1]).expect("valid input");
        concat(
            &[
                p.alpha.reshape(&[1, 1024]),
                p.p_m.reshape(&[1, ch * 256]),
                p.p_d.reshape(&[1, ch * 16]),
                p.p_s.reshape(&[1, ch * 4]),
            ],
            1,
        )
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        ArrayD::from_shape_simple_fn(IxDyn(shape), || u.sample(&mut rng))
    }

    #[test]
    fn pointwise_conv_is_exact() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(1);
        let conv = Conv2d::pointwise(&mut Builder::new(&mut store, &mut rng), "c", 4, 8, true);
        let mut inputs = vec![random(&[2, 4, 5, 5], 2)];
        let opts = GradcheckOptions {
            max_entries: usize::MAX,
            ..GradcheckOptions::for_precision::<f64>()
        };
        let report = check_gradients(&mut store, &mut inputs, |ctx, x| conv.forward(ctx, x[0]).sum(), opts);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn relative_error_uses_scale_floor() {
        assert_eq!(relative_errors(&[1.0, 0.0], &[1.0, 1e-9], 1.0), 1e-9 / (1e-3 + 1e-12));
        assert!(relative_errors(&[2.0], &[1.0], 2.0) > 0.49);
    }

    #[test]
    fn every_module_class_passes_in_double_precision() {
        for name in MODULE_CASES {
            let report = run_case::<f64>(name, GradcheckOptions::for_precision::<f64>()).unwrap();
            assert!(report.passed(), "{name}: {report:?}");
        }
    }

    #[test]
    fn unknown_case_is_a_config_error() {
        assert!(matches!(run_case::<f64>("nope", GradcheckOptions::for_precision::<f64>()), Err(DcamError::Config(_))));
    }

    #[test]
    fn narrow_model_matches_fine_differences() {
        // End to end, ReLU and normalization kinks lie within 1e-4 of the
        // evaluation point, so the whole network is checked with a finer step.
        let opts = GradcheckOptions {
            max_entries: 2,
            step: 1e-7,
            ..GradcheckOptions::for_precision::<f64>()
        };
        for mode in [GuidanceMode::Click, GuidanceMode::Trimap] {
            let report = run_model_case::<f64>(&gradcheck_config(mode), opts).unwrap();
            assert!(report.passed(), "{mode:?}: {report:?}");
        }
    }
}

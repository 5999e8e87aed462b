//! Dual-context aggregation: guidance embedding, global object aggregation
//! over all positions, and local appearance aggregation inside windows,
//! cascaded and followed by an auxiliary head.

use crate::backbone::{ensure_finite, FeaturePack};
use crate::config::{GoaVariant, LaaVariant, ModelConfig};
use crate::error::{DcamError, Result};
use crate::nn::{Builder, Conv2d, Ctx, PredictionHead};
use crate::tensor::{self, batch_matmul, softmax_last, ConvOptions, Scalar, Var};

/// Scale on the Kaiming std of projections that end a residual branch, so
/// each aggregator starts close to the identity and features stay bounded
/// through the cascade.
pub const RESIDUAL_INIT_GAIN: f64 = 0.1;

fn kaiming_pointwise(cin: usize) -> f64 {
    (2.0 / cin as f64).sqrt()
}

/// A pointwise projection ending a residual branch.
fn residual_projection<F: Scalar>(b: &mut Builder<'_, F>, name: &str, cin: usize, cout: usize) -> Conv2d {
    Conv2d::with_std(b, name, cin, cout, 1, ConvOptions::default(), true, RESIDUAL_INIT_GAIN * kaiming_pointwise(cin))
}

/// A query or key projection to `d` channels. Each side takes `d^(-1/4)` so
/// the unscaled dot products start with unit-order spread.
fn score_projection<F: Scalar>(b: &mut Builder<'_, F>, name: &str, cin: usize, d: usize) -> Conv2d {
    let std = kaiming_pointwise(cin) * (d as f64).powf(-0.25);
    Conv2d::with_std(b, name, cin, d, 1, ConvOptions::default(), true, std)
}

/// Single-head attention between token maps.
///
/// `q`, `k` are `(B, T, d)` and `v` is `(B, T, C)`. Scores are the raw dot
/// products with no temperature. Returns `(weights (B, T, T), output (B, T, C))`.
pub fn attend<'t, F: Scalar>(q: Var<'t, F>, k: Var<'t, F>, v: Var<'t, F>) -> (Var<'t, F>, Var<'t, F>) {
    let weights = softmax_last(batch_matmul(q, k, false, true));
    (weights, batch_matmul(weights, v, false, false))
}

/// `(N, C, H, W)` -> `(N, H*W, C)`.
pub fn to_tokens<F: Scalar>(x: Var<'_, F>) -> Var<'_, F> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).permute(&[0, 2, 1])
}

/// `(N, H*W, C)` -> `(N, C, H, W)`.
pub fn from_tokens<F: Scalar>(x: Var<'_, F>, h: usize, w: usize) -> Var<'_, F> {
    let s = x.shape();
    x.permute(&[0, 2, 1]).reshape(&[s[0], s[2], h, w])
}

/// Splits an `(N, C, H, W)` map whose sides are multiples of `s` into
/// `(N * H/s * W/s, s*s, C)` window tokens, windows in row-major order.
pub fn window_partition<F: Scalar>(x: Var<'_, F>, s: usize) -> Var<'_, F> {
    let sh = x.shape();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    assert!(h % s == 0 && w % s == 0, "window_partition: {h}x{w} not a multiple of {s}");
    let (hb, wb) = (h / s, w / s);
    x.reshape(&[n, c, hb, s, wb, s])
        .permute(&[0, 2, 4, 3, 5, 1])
        .reshape(&[n * hb * wb, s * s, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<F: Scalar>(x: Var<'_, F>, n: usize, h: usize, w: usize, s: usize) -> Var<'_, F> {
    let c = x.shape()[2];
    let (hb, wb) = (h / s, w / s);
    x.reshape(&[n, hb, wb, s, s, c])
        .permute(&[0, 5, 1, 3, 2, 4])
        .reshape(&[n, c, h, w])
}

/// Pixelwise one-hidden-layer perceptron from the guidance raster to
/// context channels, added onto the context features.
#[derive(Debug, Clone)]
pub struct GuidanceEmbedding {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

impl GuidanceEmbedding {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, guidance_channels: usize, hidden: usize, channels: usize) -> Self {
        let mut b = b.sub("gem");
        Self {
            hidden: Conv2d::pointwise(&mut b, "hidden", guidance_channels, hidden, true),
            out: Conv2d::pointwise(&mut b, "out", hidden, channels, true),
        }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, guidance: Var<'t, F>, fc: Var<'t, F>) -> Result<Var<'t, F>> {
        let s = fc.shape();
        let g = guidance.resize_nearest(s[2], s[3]);
        let fg = self.out.forward(ctx, self.hidden.forward(ctx, g).relu());
        if fg.shape() != s {
            return Err(DcamError::Contract(format!(
                "guidance features {:?} do not match context features {s:?}",
                fg.shape()
            )));
        }
        Ok(fc.add(fg))
    }
}

/// Intermediate values of one global object aggregation.
#[derive(Debug, Clone, Copy)]
pub struct GoaTrace<'t, F: Scalar> {
    pub object_semantics: Var<'t, F>,
    pub query: Var<'t, F>,
    pub key: Var<'t, F>,
    pub value: Var<'t, F>,
    pub attention: Var<'t, F>,
    pub residual: Var<'t, F>,
    pub intermediate: Var<'t, F>,
    pub output: Var<'t, F>,
}

#[derive(Debug, Clone)]
pub struct GlobalObjectAggregator {
    /// Present for the object-semantics variant.
    pub fuse: Option<Conv2d>,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub refine: Conv2d,
    pub token_cap: usize,
}

impl GlobalObjectAggregator {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, name: &str, channels: usize, semantic_channels: usize, variant: GoaVariant, token_cap: usize) -> Self {
        assert!(variant != GoaVariant::Off, "no aggregator for the Off variant");
        let mut b = b.sub(name);
        let qk = (channels / 2).max(8);
        Self {
            fuse: (variant == GoaVariant::ObjectSemantics)
                .then(|| residual_projection(&mut b, "fuse", channels + semantic_channels, channels)),
            query: score_projection(&mut b, "query", channels, qk),
            key: score_projection(&mut b, "key", channels, qk),
            value: residual_projection(&mut b, "value", channels, channels),
            refine: residual_projection(&mut b, "refine", channels, channels),
            token_cap,
        }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, f_obj: Var<'t, F>, f_s: Var<'t, F>) -> Result<GoaTrace<'t, F>> {
        let s = f_obj.shape();
        let (h, w) = (s[2], s[3]);
        if h * w > self.token_cap {
            return Err(DcamError::Resolution(format!(
                "global attention over {h}x{w} = {} tokens exceeds the cap of {}; downscale the input",
                h * w,
                self.token_cap
            )));
        }
        let f_os = match &self.fuse {
            Some(fuse) => {
                let f_s = f_s.resize_bilinear(h, w);
                f_obj.add(fuse.forward(ctx, tensor::concat(&[f_obj, f_s], 1)))
            }
            None => f_obj,
        };
        let q = to_tokens(self.query.forward(ctx, f_os));
        let k = to_tokens(self.key.forward(ctx, f_os));
        let v = to_tokens(self.value.forward(ctx, f_os));
        let (attention, r) = attend(q, k, v);
        let residual = from_tokens(r, h, w);
        let intermediate = f_obj.add(residual);
        let output = intermediate.add(self.refine.forward(ctx, intermediate));
        Ok(GoaTrace {
            object_semantics: f_os,
            query: q,
            key: k,
            value: v,
            attention,
            residual,
            intermediate,
            output,
        })
    }
}

/// Intermediate values of one local appearance aggregation.
#[derive(Debug, Clone, Copy)]
pub struct LaaTrace<'t, F: Scalar> {
    pub input: Var<'t, F>,
    pub attention: Option<Var<'t, F>>,
    pub low: Option<Var<'t, F>>,
    pub high: Option<Var<'t, F>>,
    pub output: Var<'t, F>,
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
}

/// Two 3x3 convolutions and a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct HighFrequencyPath {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub project: Conv2d,
}

#[derive(Debug, Clone)]
pub struct LocalAppearanceAggregator {
    pub fuse: Conv2d,
    pub window: Option<WindowAttention>,
    pub high: Option<HighFrequencyPath>,
    pub refine: Option<Conv2d>,
    pub window_s: usize,
}

impl LocalAppearanceAggregator {
    pub fn new<F: Scalar>(
        b: &mut Builder<'_, F>,
        name: &str,
        channels: usize,
        appearance_channels: usize,
        variant: LaaVariant,
        window_s: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let qk = (channels / 2).max(8);
        let fuse = residual_projection(&mut b, "fuse", channels + appearance_channels, channels);
        let window = (variant != LaaVariant::Off).then(|| WindowAttention {
            query: score_projection(&mut b, "query", channels, qk),
            key: score_projection(&mut b, "key", channels, qk),
            value: residual_projection(&mut b, "value", channels, channels),
        });
        let high = (variant == LaaVariant::Hybrid).then(|| HighFrequencyPath {
            conv1: Conv2d::new(&mut b, "high1", channels, channels, 3, ConvOptions::same(3, 1), true),
            conv2: Conv2d::new(&mut b, "high2", channels, channels, 3, ConvOptions::same(3, 1), true),
            project: residual_projection(&mut b, "high_project", channels, channels),
        });
        let refine = (variant != LaaVariant::Off).then(|| residual_projection(&mut b, "refine", channels, channels));
        Self {
            fuse,
            window,
            high,
            refine,
            window_s,
        }
    }

    /// `f_in` is brought to `f2`'s resolution, fused with it, then refined.
    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, f_in: Var<'t, F>, f2: Var<'t, F>) -> Result<LaaTrace<'t, F>> {
        let s = self.window_s;
        if s < 1 {
            return Err(DcamError::Config("window size s must be at least 1".into()));
        }
        let f2s = f2.shape();
        let (n, h, w) = (f2s[0], f2s[2], f2s[3]);
        let up = f_in.resize_bilinear(h, w);
        let f_la = up.add(self.fuse.forward(ctx, tensor::concat(&[up, f2], 1)));
        let Some(win) = &self.window else {
            return Ok(LaaTrace {
                input: f_la,
                attention: None,
                low: None,
                high: None,
                output: f_la,
            });
        };
        let (hp, wp) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
        let padded = f_la.pad_bottom_right(hp - h, wp - w);
        let q = window_partition(win.query.forward(ctx, padded), s);
        let k = window_partition(win.key.forward(ctx, padded), s);
        let v = window_partition(win.value.forward(ctx, padded), s);
        let (attention, r) = attend(q, k, v);
        let low = window_reverse(r, n, hp, wp, s).crop_top_left(h, w);
        let high = self.high.as_ref().map(|p| {
            let y = p.conv1.forward(ctx, f_la).relu();
            let y = p.conv2.forward(ctx, y).relu();
            p.project.forward(ctx, y)
        });
        let mut intermediate = f_la.add(low);
        if let Some(hf) = high {
            intermediate = intermediate.add(hf);
        }
        let refine = self.refine.as_ref().expect("refine exists with attention");
        let output = intermediate.add(refine.forward(ctx, intermediate));
        Ok(LaaTrace {
            input: f_la,
            attention: Some(attention),
            low: Some(low),
            high,
            output,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CascadeRound {
    pub goa: Option<GlobalObjectAggregator>,
    pub laa: LocalAppearanceAggregator,
}

#[derive(Debug, Clone, Copy)]
pub struct AggregationOutput<'t, F: Scalar> {
    /// Refined features at 1/8 resolution.
    pub refined: Var<'t, F>,
    pub aux: Var<'t, F>,
}

/// The cascade. With no rounds the context is only upsampled and fused with
/// the appearance features.
#[derive(Debug, Clone)]
pub struct DualContextAggregator {
    pub gem: Option<GuidanceEmbedding>,
    pub base: Option<LocalAppearanceAggregator>,
    pub rounds: Vec<CascadeRound>,
    pub head: PredictionHead,
}

impl DualContextAggregator {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, cfg: &ModelConfig) -> Self {
        let w = cfg.widths();
        let c = w.context;
        let mut b = b.sub("aggregation");
        let mode = cfg.guidance_mode;
        let (gem, base, rounds) = if cfg.nca == 0 {
            let base = LocalAppearanceAggregator::new(&mut b, "base", c, w.stage_out[1], LaaVariant::Off, cfg.window_s);
            (None, Some(base), Vec::new())
        } else {
            let gem = cfg.use_gem.then(|| GuidanceEmbedding::new(&mut b, 3, c, c));
            let rounds = (0..cfg.nca)
                .map(|i| {
                    let mut rb = b.sub(&format!("round{i}"));
                    CascadeRound {
                        goa: (cfg.goa_variant != GoaVariant::Off).then(|| {
                            GlobalObjectAggregator::new(&mut rb, "goa", c, w.stage_out[2], cfg.goa_variant, cfg.token_cap)
                        }),
                        laa: LocalAppearanceAggregator::new(&mut rb, "laa", c, w.stage_out[1], cfg.laa_variant, cfg.window_s),
                    }
                })
                .collect();
            (gem, None, rounds)
        };
        let head = PredictionHead::new(&mut b, "aux_head", c, mode.aux_channels(), !mode.predicts_trimap());
        Self { gem, base, rounds, head }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, pack: &FeaturePack<'t, F>, guidance: Var<'t, F>) -> Result<AggregationOutput<'t, F>> {
        let refined = if let Some(base) = &self.base {
            base.forward(ctx, pack.fc, pack.f2)?.output
        } else {
            let mut x = match &self.gem {
                Some(gem) => gem.forward(ctx, guidance, pack.fc)?,
                None => pack.fc,
            };
            for round in &self.rounds {
                if let Some(goa) = &round.goa {
                    x = goa.forward(ctx, x, pack.f3)?.output;
                }
                x = round.laa.forward(ctx, x, pack.f2)?.output;
            }
            x
        };
        let aux = self.head.forward(ctx, refined);
        ensure_finite(&[("aggregated features", refined), ("aggregation auxiliary prediction", aux)])?;
        Ok(AggregationOutput { refined, aux })
    }
}

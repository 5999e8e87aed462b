//! Semantic backbone: deep stem, group-normalized bottleneck stages with an
//! atrous last stage, context compression and the first auxiliary head.

use crate::config::ModelConfig;
use crate::error::{DcamError, Result};
use crate::nn::{Builder, Conv2d, ConvNormAct, Ctx, GroupNorm, PredictionHead};
use crate::tensor::{self, max_pool2d, ConvOptions, Scalar, Var};

/// Multi-resolution features consumed by aggregation and decoding.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePack<'t, F: Scalar> {
    /// Stem output at 1/2 resolution.
    pub stem: Var<'t, F>,
    /// First stage, 1/4.
    pub f1: Var<'t, F>,
    /// Second stage (appearance features), 1/8.
    pub f2: Var<'t, F>,
    /// Third stage (semantic features), 1/16.
    pub f3: Var<'t, F>,
    /// Compressed context features, 1/16.
    pub fc: Var<'t, F>,
}

/// Residual stage layout: (blocks, first-block stride, dilation).
pub const STAGE_LAYOUT: [(usize, usize, usize); 4] = [(3, 1, 1), (4, 2, 1), (6, 2, 1), (3, 1, 2)];

/// Initial scale of the last normalization in each bottleneck.
pub const RESIDUAL_GAMMA: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Bottleneck {
    reduce: ConvNormAct,
    spatial: ConvNormAct,
    expand: Conv2d,
    expand_norm: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl Bottleneck {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, name: &str, cin: usize, mid: usize, cout: usize, stride: usize, dilation: usize) -> Self {
        let mut b = b.sub(name);
        let spatial_opts = ConvOptions {
            stride,
            padding: dilation,
            dilation,
        };
        let shortcut = (cin != cout || stride != 1).then(|| {
            let opts = ConvOptions {
                stride,
                ..ConvOptions::default()
            };
            (
                Conv2d::new(&mut b, "shortcut", cin, cout, 1, opts, false),
                GroupNorm::new(&mut b, "shortcut_norm", cout),
            )
        });
        Self {
            reduce: ConvNormAct::new(&mut b, "reduce", cin, mid, 1, ConvOptions::default()),
            spatial: ConvNormAct::new(&mut b, "spatial", mid, mid, 3, spatial_opts),
            expand: Conv2d::pointwise(&mut b, "expand", mid, cout, false),
            // Small scale: each block starts close to its shortcut.
            expand_norm: GroupNorm::with_gamma(&mut b, "expand_norm", cout, RESIDUAL_GAMMA),
            shortcut,
        }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        let y = self.spatial.forward(ctx, self.reduce.forward(ctx, x));
        let y = self.expand_norm.forward(ctx, self.expand.forward(ctx, y));
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(ctx, conv.forward(ctx, x)),
            None => x,
        };
        y.add(skip).relu()
    }
}

#[derive(Debug, Clone)]
pub struct ResidualStage {
    pub blocks: Vec<Bottleneck>,
}

impl ResidualStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        b: &mut Builder<'_, F>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        blocks: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let blocks = (0..blocks)
            .map(|i| {
                let (inc, s) = if i == 0 { (cin, stride) } else { (cout, 1) };
                Bottleneck::new(&mut b, &format!("block{i}"), inc, mid, cout, s, dilation)
            })
            .collect();
        Self { blocks }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        self.blocks.iter().fold(x, |h, blk| blk.forward(ctx, h))
    }
}

/// Three 3x3 convolutions, the first with stride 2.
#[derive(Debug, Clone)]
pub struct DeepStem {
    pub layers: [ConvNormAct; 3],
}

impl DeepStem {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, cin: usize, mid: usize, cout: usize) -> Self {
        let mut b = b.sub("stem");
        let down = ConvOptions {
            stride: 2,
            padding: 1,
            dilation: 1,
        };
        Self {
            layers: [
                ConvNormAct::new(&mut b, "conv0", cin, mid, 3, down),
                ConvNormAct::new(&mut b, "conv1", mid, mid, 3, ConvOptions::same(3, 1)),
                ConvNormAct::new(&mut b, "conv2", mid, cout, 3, ConvOptions::same(3, 1)),
            ],
        }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        self.layers.iter().fold(x, |h, l| l.forward(ctx, h))
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: DeepStem,
    pub stages: Vec<ResidualStage>,
    pub compress: ConvNormAct,
    pub head: PredictionHead,
}

pub const INPUT_CHANNELS: usize = 6;
pub const STRIDE_MULTIPLE: usize = 32;

impl Backbone {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, cfg: &ModelConfig) -> Self {
        let w = cfg.widths();
        let mut b = b.sub("backbone");
        let stem = DeepStem::new(&mut b, INPUT_CHANNELS, w.stem_mid, w.stem_out);
        let mut cin = w.stem_out;
        let stages = STAGE_LAYOUT
            .iter()
            .enumerate()
            .map(|(i, &(blocks, stride, dilation))| {
                let stage = ResidualStage::new(&mut b, &format!("stage{}", i + 1), cin, w.stage_mid[i], w.stage_out[i], blocks, stride, dilation);
                cin = w.stage_out[i];
                stage
            })
            .collect();
        let compress = ConvNormAct::new(&mut b, "compress", w.stage_out[3], w.context, 1, ConvOptions::default());
        let mode = cfg.guidance_mode;
        let head = PredictionHead::new(&mut b, "aux_head", w.context, mode.aux_channels(), !mode.predicts_trimap());
        Self {
            stem,
            stages,
            compress,
            head,
        }
    }

    /// Returns the feature pack and the auxiliary prediction at 1/16.
    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, image: Var<'t, F>, guidance: Var<'t, F>) -> Result<(FeaturePack<'t, F>, Var<'t, F>)> {
        let (is, gs) = (image.shape(), guidance.shape());
        if is.len() != 4 || is[1] != 3 {
            return Err(DcamError::Shape(format!("image must be (N, 3, H, W), got {is:?}")));
        }
        if gs != [is[0], 3, is[2], is[3]] {
            return Err(DcamError::Shape(format!("guidance {gs:?} does not match image {is:?}")));
        }
        if is[2] % STRIDE_MULTIPLE != 0 || is[3] % STRIDE_MULTIPLE != 0 {
            return Err(DcamError::Shape(format!(
                "spatial size {}x{} is not divisible by {STRIDE_MULTIPLE}; pad the input first",
                is[2], is[3]
            )));
        }
        let x = tensor::concat(&[image, guidance], 1);
        let stem = self.stem.forward(ctx, x);
        let pooled = max_pool2d(stem, 3, 2, 1);
        let f1 = self.stages[0].forward(ctx, pooled);
        let f2 = self.stages[1].forward(ctx, f1);
        let f3 = self.stages[2].forward(ctx, f2);
        let f4 = self.stages[3].forward(ctx, f3);
        let fc = self.compress.forward(ctx, f4);
        let aux = self.head.forward(ctx, fc);
        ensure_finite(&[("context features", fc), ("backbone auxiliary prediction", aux)])?;
        Ok((FeaturePack { stem, f1, f2, f3, fc }, aux))
    }
}

pub(crate) fn ensure_finite<F: Scalar>(vars: &[(&str, Var<'_, F>)]) -> Result<()> {
    for (name, v) in vars {
        if v.value().iter().any(|x| !x.is_finite()) {
            return Err(DcamError::Numeric(format!("non-finite values in {name}")));
        }
    }
    Ok(())
}

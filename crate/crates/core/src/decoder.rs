//! Hierarchical matting decoder: progressively upsamples the refined context
//! while fusing backbone features, predicts the auxiliary map at 1/2 and the
//! final alpha at full resolution.

use ndarray::{ArrayD, IxDyn};

use crate::backbone::{ensure_finite, FeaturePack};
use crate::config::ModelConfig;
use crate::error::{DcamError, Result};
use crate::nn::{Builder, Conv2d, ConvNormAct, Ctx, GroupNorm, PredictionHead};
use crate::tensor::{self, ConvOptions, Scalar, Var};

/// `relu(x + GN(conv3x3(x)))`.
#[derive(Debug, Clone)]
pub struct RefineBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl RefineBlock {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            conv: Conv2d::new(&mut b, "conv", channels, channels, 3, ConvOptions::same(3, 1), false),
            norm: GroupNorm::new(&mut b, "norm", channels),
        }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.add(self.norm.forward(ctx, self.conv.forward(ctx, x))).relu()
    }
}

/// Concatenation, 1x1 compression, then two refinement blocks.
#[derive(Debug, Clone)]
pub struct FusionLevel {
    pub compress: ConvNormAct,
    pub blocks: [RefineBlock; 2],
}

impl FusionLevel {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, name: &str, cin: usize, cout: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            compress: ConvNormAct::new(&mut b, "compress", cin, cout, 1, ConvOptions::default()),
            blocks: [RefineBlock::new(&mut b, "refine0", cout), RefineBlock::new(&mut b, "refine1", cout)],
        }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, parts: &[Var<'t, F>]) -> Var<'t, F> {
        let x = self.compress.forward(ctx, tensor::concat(parts, 1));
        self.blocks.iter().fold(x, |h, blk| blk.forward(ctx, h))
    }
}

/// Final alpha regression from upsampled matte features and the image.
#[derive(Debug, Clone)]
pub struct AlphaHead {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput<'t, F: Scalar> {
    pub alpha: Var<'t, F>,
    pub p_m: Var<'t, F>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub semantic: FusionLevel,
    pub appearance: FusionLevel,
    pub quarter: FusionLevel,
    pub matte: ConvNormAct,
    pub aux_head: PredictionHead,
    pub alpha_head: AlphaHead,
}

impl Decoder {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, cfg: &ModelConfig) -> Self {
        let w = cfg.widths();
        let mut b = b.sub("decoder");
        let mode = cfg.guidance_mode;
        let semantic = FusionLevel::new(&mut b, "semantic", w.context + w.stage_out[2], w.dec_semantic);
        let appearance = FusionLevel::new(&mut b, "appearance", w.dec_semantic + w.stage_out[1], w.dec_appearance);
        let quarter = FusionLevel::new(&mut b, "quarter", w.dec_appearance + w.stage_out[0], w.dec_quarter);
        let matte = ConvNormAct::new(&mut b, "matte", w.dec_quarter + w.stem_out, w.dec_matte, 3, ConvOptions::same(3, 1));
        let aux_head = PredictionHead::new(&mut b, "aux_head", w.dec_matte, mode.aux_channels(), !mode.predicts_trimap());
        let alpha_head = {
            let mut hb = b.sub("alpha_head");
            let hidden = Conv2d::new(&mut hb, "hidden", w.dec_matte + 3, w.dec_final, 3, ConvOptions::same(3, 1), true);
            // Small output weights and a 0.5 bias keep the clamp inactive at start.
            let std = 0.1 * (1.0 / (w.dec_final * 9) as f64).sqrt();
            let out = Conv2d::with_std(&mut hb, "out", w.dec_final, 1, 3, ConvOptions::same(3, 1), true, std);
            *hb.param_mut(out.bias.unwrap()) = ArrayD::from_elem(IxDyn(&[1]), F::of(0.5));
            AlphaHead { hidden, out }
        };
        Self {
            semantic,
            appearance,
            quarter,
            matte,
            aux_head,
            alpha_head,
        }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, pack: &FeaturePack<'t, F>, refined: Var<'t, F>, image: Var<'t, F>) -> Result<DecoderOutput<'t, F>> {
        let (rs, f2s, is) = (refined.shape(), pack.f2.shape(), image.shape());
        if rs[2..] != f2s[2..] || is[2] != 2 * pack.stem.shape()[2] || is[3] != 2 * pack.stem.shape()[3] {
            return Err(DcamError::Contract(format!(
                "decoder inputs inconsistent: refined {rs:?}, f2 {f2s:?}, image {is:?}"
            )));
        }
        let (h8, w8) = (f2s[2], f2s[3]);
        let f3 = pack.f3.resize_bilinear(h8, w8);
        let x = self.semantic.forward(ctx, &[refined, f3]);
        let x = self.appearance.forward(ctx, &[x, pack.f2]);
        let f1s = pack.f1.shape();
        let x = x.resize_bilinear(f1s[2], f1s[3]);
        let x = self.quarter.forward(ctx, &[x, pack.f1]);
        let ss = pack.stem.shape();
        let x = x.resize_bilinear(ss[2], ss[3]);
        let matte = self.matte.forward(ctx, tensor::concat(&[x, pack.stem], 1));
        let p_m = self.aux_head.forward(ctx, matte);
        let up = matte.resize_bilinear(is[2], is[3]);
        let h = self.alpha_head.hidden.forward(ctx, tensor::concat(&[up, image], 1)).relu();
        let alpha = self.alpha_head.out.forward(ctx, h).clamp(F::zero(), F::one());
        ensure_finite(&[("decoder auxiliary prediction", p_m), ("alpha prediction", alpha)])?;
        Ok(DecoderOutput { alpha, p_m })
    }
}

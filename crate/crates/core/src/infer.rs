//! Single-image prediction: stride padding, oversize rescaling, fusion of the
//! coarse trimap head with the alpha head, and known-region pass-through.

use ndarray::{s, Array2, Array3, ArrayD, Axis};

use crate::backbone::STRIDE_MULTIPLE;
use crate::config::{GoaVariant, GuidanceMode, ModelConfig};
use crate::dataio::{resize_plane, AlphaMatte, Image};
use crate::error::{DcamError, Result};
use crate::guidance::{default_click_radius, encode_guidance, Payload, Trimap, BACKGROUND, FOREGROUND};
use crate::model::Dcam;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{bilinear_taps, nearest_taps, reflect101, Tape, Taps};
use crate::training::checkpoint::Checkpoint;

/// Stride of the context features entering the aggregation cascade.
pub const CONTEXT_STRIDE: usize = 16;
/// Stride of the local appearance output that later cascade rounds attend over.
pub const REFINED_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    /// In trimap mode, copy the trimap's known labels into the output.
    pub known_passthrough: bool,
    /// Click disk radius; defaults to the size-dependent radius.
    pub click_radius: Option<f64>,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            known_passthrough: true,
            click_radius: None,
        }
    }
}

/// A loaded network ready for prediction. Parameters are never mutated.
#[derive(Debug, Clone)]
pub struct Matter {
    pub model: Dcam,
    pub params: ParamStore<f32>,
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

fn apply_taps(src: &Array2<f32>, ty: &Taps, tx: &Taps) -> Array2<f32> {
    Array2::from_shape_fn((ty.len(), tx.len()), |(y, x)| {
        let mut acc = 0.0f64;
        for &(iy, wy) in &ty[y] {
            for &(ix, wx) in &tx[x] {
                acc += wy * wx * src[[iy, ix]] as f64;
            }
        }
        acc as f32
    })
}

fn map_channels(src: &Array3<f32>, f: impl Fn(&Array2<f32>) -> Array2<f32>) -> Array3<f32> {
    let planes: Vec<Array2<f32>> = src.outer_iter().map(|p| f(&p.to_owned())).collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("planes share a shape")
}

/// Mirror-pads the bottom and right edges to `(h, w)`.
fn reflect_pad(src: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, sh, sw) = src.dim();
    Array3::from_shape_fn((c, h, w), |(k, y, x)| src[[k, reflect101(y as isize, sh), reflect101(x as isize, sw)]])
}

/// Stride of the finest map any global aggregator of `cfg` attends over.
/// Rounds after the first take the 1/8 output of the previous round.
pub fn attention_stride(cfg: &ModelConfig) -> usize {
    if cfg.nca >= 2 && cfg.goa_variant != GoaVariant::Off {
        REFINED_STRIDE
    } else {
        CONTEXT_STRIDE
    }
}

/// Largest working size no larger than `(h, w)` whose padded attention map,
/// at `stride`, fits within `token_cap` tokens.
pub fn working_size(h: usize, w: usize, token_cap: usize, stride: usize) -> (usize, usize) {
    let tokens = |h: usize, w: usize| (round_up(h, STRIDE_MULTIPLE) / stride) * (round_up(w, STRIDE_MULTIPLE) / stride);
    if tokens(h, w) <= token_cap {
        return (h, w);
    }
    let mut scale = ((token_cap * stride * stride) as f64 / (h * w) as f64).sqrt();
    loop {
        let (nh, nw) = (((h as f64 * scale).floor() as usize).max(1), ((w as f64 * scale).floor() as usize).max(1));
        if tokens(nh, nw) <= token_cap {
            return (nh, nw);
        }
        scale *= 0.97;
    }
}

impl Matter {
    pub fn new(model: Dcam, params: ParamStore<f32>) -> Self {
        Self { model, params }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self::new(ckpt.build_model()?, ckpt.params.clone()))
    }

    pub fn mode(&self) -> GuidanceMode {
        self.model.cfg.guidance_mode
    }

    /// Encodes `payload` for the model's guidance mode and predicts alpha.
    pub fn predict(&self, image: &Image, payload: Payload, opts: &InferOptions) -> Result<AlphaMatte> {
        let (_, h, w) = image.dim();
        let radius = opts.click_radius.unwrap_or_else(|| default_click_radius(h, w));
        let g = encode_guidance(self.mode(), payload, h, w, radius)?;
        let trimap = match payload {
            Payload::Trimap(t) => Some(t),
            _ => None,
        };
        self.predict_raster(image, &g.raster, trimap, opts)
    }

    /// Predicts alpha from an already encoded `(3, H, W)` guidance raster.
    pub fn predict_raster(&self, image: &Image, guidance: &Array3<f32>, trimap: Option<&Trimap>, opts: &InferOptions) -> Result<AlphaMatte> {
        let (c, h, w) = image.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(DcamError::Shape(format!("image must be (3, H, W) and non-empty, got {:?}", image.dim())));
        }
        if guidance.dim() != (3, h, w) {
            return Err(DcamError::Shape(format!("guidance {:?} does not match image {:?}", guidance.dim(), image.dim())));
        }
        if let Some(t) = trimap {
            if t.dim() != (h, w) {
                return Err(DcamError::Shape(format!("trimap {:?} does not match image {h}x{w}", t.dim())));
            }
        }
        let (wh, ww) = working_size(h, w, self.model.cfg.token_cap, attention_stride(&self.model.cfg));
        let resized = (wh, ww) != (h, w);
        let (img, guide) = if resized {
            let (ty, tx) = (nearest_taps(h, wh), nearest_taps(w, ww));
            (
                map_channels(image, |p| resize_plane(p.view(), wh, ww)),
                map_channels(guidance, |p| apply_taps(p, &ty, &tx)),
            )
        } else {
            (image.clone(), guidance.clone())
        };
        let (ph, pw) = (round_up(wh, STRIDE_MULTIPLE), round_up(ww, STRIDE_MULTIPLE));
        let img = reflect_pad(&img, ph, pw);
        let guide = reflect_pad(&guide, ph, pw);

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params, false);
        let to_batch = |a: Array3<f32>| a.insert_axis(Axis(0)).into_dyn();
        let x = tape.constant(to_batch(img));
        let g = tape.constant(to_batch(guide));
        let pred = self.model.forward(&ctx, x, g)?;
        let alpha_full = pred.alpha.value();
        let mut alpha: Array2<f32> = alpha_full.slice(s![0, 0, ..wh, ..ww]).to_owned();

        if self.mode().predicts_trimap() {
            let labels = coarse_labels(&pred.p_m.value(), ph, pw);
            for (a, &l) in alpha.iter_mut().zip(labels.slice(s![..wh, ..ww]).iter()) {
                match l {
                    FOREGROUND => *a = 1.0,
                    BACKGROUND => *a = 0.0,
                    _ => {}
                }
            }
        }
        if resized {
            alpha = resize_plane(alpha.view(), h, w);
        }
        alpha.mapv_inplace(|v| v.clamp(0.0, 1.0));
        if let (Some(t), true) = (trimap, self.mode() == GuidanceMode::Trimap && opts.known_passthrough) {
            for (a, &l) in alpha.iter_mut().zip(t.iter()) {
                match l {
                    FOREGROUND => *a = 1.0,
                    BACKGROUND => *a = 0.0,
                    _ => {}
                }
            }
        }
        Ok(alpha)
    }
}

/// Bilinearly upsamples `(1, 3, h, w)` trimap logits to `(H, W)` and takes
/// the per-pixel argmax label.
pub fn coarse_labels(logits: &ArrayD<f32>, h: usize, w: usize) -> Array2<u8> {
    let s = logits.shape();
    let (lh, lw) = (s[2], s[3]);
    let (ty, tx) = (bilinear_taps(lh, h), bilinear_taps(lw, w));
    let planes: Vec<Array2<f32>> = (0..3)
        .map(|k| {
            let p = logits.slice(s![0, k, .., ..]).to_owned();
            apply_taps(&p, &ty, &tx)
        })
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0u8;
        for k in 1..3u8 {
            if planes[k as usize][[y, x]] > planes[best as usize][[y, x]] {
                best = k;
            }
        }
        best
    })
}

/// `(N, C, H, W)` batch from equally sized `(C, H, W)` arrays.
pub fn stack_batch(items: &[&Array3<f32>]) -> Result<ArrayD<f32>> {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views)
        .map(|a| a.into_dyn())
        .map_err(|e| DcamError::Shape(format!("cannot batch samples: {e}")))
}

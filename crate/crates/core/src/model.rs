//! The assembled network.

use crate::aggregation::DualContextAggregator;
use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::error::Result;
use crate::nn::{init_rng, Builder, Ctx, ParamStore};
use crate::tensor::{Scalar, Var};

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MattePrediction<'t, F: Scalar> {
    /// Alpha at input resolution, in `[0, 1]`.
    pub alpha: Var<'t, F>,
    /// Decoder auxiliary map at 1/2.
    pub p_m: Var<'t, F>,
    /// Backbone auxiliary map at 1/16.
    pub p_s: Var<'t, F>,
    /// Aggregation auxiliary map at 1/8.
    pub p_d: Var<'t, F>,
}

#[derive(Debug, Clone)]
pub struct Dcam {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub aggregation: DualContextAggregator,
    pub decoder: Decoder,
}

impl Dcam {
    /// Registers all parameters in `store`, drawn from `seed`.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(seed);
        let mut b = Builder::new(store, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(&mut b, cfg),
            aggregation: DualContextAggregator::new(&mut b, cfg),
            decoder: Decoder::new(&mut b, cfg),
        })
    }

    pub fn init<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, cfg, seed)?;
        Ok((model, store))
    }

    /// `image` and `guidance` are `(N, 3, H, W)` with `H`, `W` multiples of 32.
    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, image: Var<'t, F>, guidance: Var<'t, F>) -> Result<MattePrediction<'t, F>> {
        let (pack, p_s) = self.backbone.forward(ctx, image, guidance)?;
        let agg = self.aggregation.forward(ctx, &pack, guidance)?;
        let dec = self.decoder.forward(ctx, &pack, agg.refined, image)?;
        Ok(MattePrediction {
            alpha: dec.alpha,
            p_m: dec.p_m,
            p_s,
            p_d: agg.aux,
        })
    }
}

/// Number of trainable scalars for a configuration.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    let (_, store) = Dcam::init::<f32>(cfg, 0)?;
    Ok(store.num_scalars())
}


//! Adam with decoupled weight decay.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{DcamError, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, cfg: AdamWConfig) -> Self {
        let zeros = |p: &ParamStore<f32>| p.ids().map(|id| ArrayD::zeros(p.get(id).raw_dim())).collect::<Vec<_>>();
        Self {
            cfg,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Option<ArrayD<f32>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(DcamError::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let decay = (1.0 - lr * weight_decay) as f32;
        let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(DcamError::Contract(format!("gradient shape {:?} for parameter of shape {:?}", g.shape(), p.shape())));
            }
            Zip::from(p).and(&mut self.m[i]).and(&mut self.v[i]).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                if decay != 1.0 {
                    *p *= decay;
                }
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            });
        }
        Ok(())
    }
}

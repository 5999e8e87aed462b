//! Parameters and the small set of layers the network is assembled from.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{self, ConvOptions, Gradients, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in registration order.
/// Values are shared copy-on-write, so clones are cheap and the store can
/// cross threads.
#[derive(Clone, Default)]
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<Arc<ArrayD<F>>>,
}

impl<F: Scalar> std::fmt::Debug for ParamStore<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.values.len())
            .field("scalars", &self.num_scalars())
            .finish()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: String, value: ArrayD<F>) -> ParamId {
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// A tape-owned copy of one tensor.
    pub fn shared(&self, id: ParamId) -> Rc<ArrayD<F>> {
        Rc::new((*self.values[id.0]).clone())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Element-type conversion, keeping names and order.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| Arc::new(v.mapv(|x| G::of(x.as_f64()))))
                .collect(),
        }
    }
}

/// Registers parameters under a dotted name prefix with Kaiming-normal init.
pub struct Builder<'a, F: Scalar> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, F: Scalar> Builder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, F> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, ArrayD::from_elem(IxDyn(shape), F::of(value)))
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        self.store.get_mut(id)
    }

    /// Normal(0, std) initialisation.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n).map(|_| F::of(dist.sample(&mut *self.rng))).collect();
        let full = self.full_name(name);
        self.store.add(full, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }
}

/// Deterministic generator for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Forward-pass context: the tape plus lazily registered parameter leaves.
pub struct Ctx<'t, 'p, F: Scalar> {
    pub tape: &'t Tape<F>,
    params: &'p ParamStore<F>,
    vars: RefCell<Vec<Option<Var<'t, F>>>>,
    track: bool,
}

impl<'t, 'p, F: Scalar> Ctx<'t, 'p, F> {
    /// `track` decides whether parameters receive gradients.
    pub fn new(tape: &'t Tape<F>, params: &'p ParamStore<F>, track: bool) -> Self {
        Self {
            tape,
            params,
            vars: RefCell::new(vec![None; params.len()]),
            track,
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'t, F> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let value = self.params.shared(id);
        let v = if self.track {
            self.tape.leaf(value)
        } else {
            self.tape.constant(Rc::unwrap_or_clone(value))
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    /// Gradients for every parameter that took part in the forward pass.
    pub fn param_grads(&self, grads: &mut Gradients<F>) -> Vec<Option<ArrayD<F>>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Largest divisor of `channels` that does not exceed 32.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(32)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOptions,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, name: &str, cin: usize, cout: usize, kernel: usize, opts: ConvOptions, bias: bool) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Self::with_std(b, name, cin, cout, kernel, opts, bias, (2.0 / fan_in).sqrt())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<F: Scalar>(
        b: &mut Builder<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: ConvOptions,
        bias: bool,
        std: f64,
    ) -> Self {
        let mut b = b.sub(name);
        let weight = b.normal("weight", &[cout, cin, kernel, kernel], std);
        let bias = bias.then(|| b.constant("bias", &[cout], 0.0));
        Self {
            weight,
            bias,
            opts,
            in_channels: cin,
            out_channels: cout,
            kernel,
        }
    }

    pub fn pointwise<F: Scalar>(b: &mut Builder<'_, F>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(b, name, cin, cout, 1, ConvOptions::default(), bias)
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        tensor::conv2d(x, ctx.param(self.weight), self.bias.map(|b| ctx.param(b)), self.opts)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, name: &str, channels: usize) -> Self {
        Self::with_gamma(b, name, channels, 1.0)
    }

    /// Starts the scale at `gamma` instead of 1.
    pub fn with_gamma<F: Scalar>(b: &mut Builder<'_, F>, name: &str, channels: usize, gamma: f64) -> Self {
        let mut b = b.sub(name);
        Self {
            gamma: b.constant("gamma", &[channels], gamma),
            beta: b.constant("beta", &[channels], 0.0),
            groups: group_count(channels),
        }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        tensor::group_norm(x, ctx.param(self.gamma), ctx.param(self.beta), self.groups, Self::EPS)
    }
}

/// Convolution, group normalization, ReLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvNormAct {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, name: &str, cin: usize, cout: usize, kernel: usize, opts: ConvOptions) -> Self {
        let mut b = b.sub(name);
        Self {
            conv: Conv2d::new(&mut b, "conv", cin, cout, kernel, opts, false),
            norm: GroupNorm::new(&mut b, "norm", cout),
        }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        self.norm.forward(ctx, self.conv.forward(ctx, x)).relu()
    }
}

/// Two 3x3 convolutions producing a prediction map: class logits, or an
/// alpha map clamped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub hidden: Conv2d,
    pub out: Conv2d,
    pub clamp: bool,
}

impl PredictionHead {
    pub fn new<F: Scalar>(b: &mut Builder<'_, F>, name: &str, cin: usize, out_channels: usize, clamp: bool) -> Self {
        let mut b = b.sub(name);
        let mid = (cin / 2).max(8);
        let hidden = Conv2d::new(&mut b, "hidden", cin, mid, 3, ConvOptions::same(3, 1), true);
        let out = if clamp {
            // Starts near 0.5 so the clamp is inactive at initialisation.
            let std = 0.1 * (1.0 / (mid * 9) as f64).sqrt();
            let conv = Conv2d::with_std(&mut b, "out", mid, out_channels, 3, ConvOptions::same(3, 1), true, std);
            *b.param_mut(conv.bias.unwrap()) = ArrayD::from_elem(IxDyn(&[out_channels]), F::of(0.5));
            conv
        } else {
            Conv2d::new(&mut b, "out", mid, out_channels, 3, ConvOptions::same(3, 1), true)
        };
        Self { hidden, out, clamp }
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        let y = self.out.forward(ctx, self.hidden.forward(ctx, x).relu());
        if self.clamp {
            y.clamp(F::zero(), F::one())
        } else {
            y
        }
    }
}

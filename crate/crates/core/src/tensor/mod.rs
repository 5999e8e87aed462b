//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`]s during a forward
//! pass. Calling [`Tape::backward`] on a scalar result walks the record in
//! reverse and returns the gradient of that scalar with respect to every
//! node that requires one. Tensors are `ArrayD` values in standard (row-major)
//! layout; image-like tensors use the `(batch, channels, height, width)` order.
//!
//! Everything is generic over [`Scalar`] so the same network code runs in
//! `f32` for training and `f64` for finite-difference verification.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

mod conv;
mod linalg;
mod loss_ops;
mod norm;
mod ops;
mod resize;

pub use conv::{conv2d, max_pool2d, ConvOptions};
pub use linalg::{batch_matmul, softmax_last};
pub use loss_ops::{focal_cross_entropy, masked_charbonnier};
pub use norm::group_norm;
pub use ops::concat;
pub use resize::{bilinear_taps, binomial5_taps, nearest_taps, reflect101, resample, Taps};

/// Floating point element type usable on a tape.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Scalar> {
    value: Rc<ArrayD<F>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Operation record for one forward pass.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var<'_, F>) -> Option<&ArrayD<F>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, F>) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push_leaf(Rc::new(value), false)
    }

    /// A leaf that accumulates a gradient (an input or a parameter).
    pub fn leaf(&self, value: Rc<ArrayD<F>>) -> Var<'_, F> {
        self.push_leaf(value, true)
    }

    pub fn input(&self, value: ArrayD<F>, requires_grad: bool) -> Var<'_, F> {
        self.push_leaf(Rc::new(value), requires_grad)
    }

    fn push_leaf(&self, value: Rc<ArrayD<F>>, requires_grad: bool) -> Var<'_, F> {
        let value = if value.is_standard_layout() { value } else { Rc::new(standard(value.as_ref().clone())) };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an operation. `backward` maps the output gradient to one
    /// optional gradient per parent; the flags say which parents need one.
    pub(crate) fn push_op<B>(&self, value: ArrayD<F>, parents: &[Var<'_, F>], backward: B) -> Var<'_, F>
    where
        B: Fn(&ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(standard(value)),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<ArrayD<F>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from `root`, seeded with ones of the root's shape.
    pub fn backward(&self, root: Var<'_, F>) -> Gradients<F> {
        let seed = ArrayD::from_elem(root.shape(), F::one());
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var<'_, F>, seed: ArrayD<F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<F>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(seed.shape(), nodes[root.id].value.shape(), "seed shape");
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                let g = standard(g);
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match grads[p].as_mut() {
                    Some(acc) => *acc += &g,
                    None => grads[p] = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn value(&self) -> Rc<ArrayD<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// The single element of a scalar-shaped value.
    pub fn item(&self) -> F {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }
}

/// Kernels index raw slices, so every stored tensor is kept row-major.
fn standard<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub(crate) fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected a (N, C, H, W) tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

#[cfg(test)]
mod tests;

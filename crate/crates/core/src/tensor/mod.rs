//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Graph`] records every operation of a single forward pass. Feature maps
//! use channel-major `[C, H, W]` layout for one image; batching happens a level
//! up by running independent graphs and reducing their parameter gradients.
//!
//! Nodes created from inputs that do not require gradients drop their backward
//! closures immediately, so inference-only graphs hold no extra buffers.

mod conv;
mod ops;
mod resize;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

pub use resize::{bilinear_weights, resize_bilinear_array};
pub(crate) use ops::{sigmoid, softplus};

/// Floating-point element type usable by the engine (`f32` or `f64`).
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Data handed to a backward closure.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the objective with respect to this node's output.
    pub grad: &'a ArrayD<T>,
    /// This node's forward value.
    pub output: &'a ArrayD<T>,
    /// Forward values of the inputs, in the order passed to [`Graph::apply`].
    pub inputs: Vec<&'a ArrayD<T>>,
    /// Which inputs actually need a gradient.
    pub needs: Vec<bool>,
}

/// Maps the output gradient to one optional gradient per input.
pub type Backward<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<ArrayD<T>>> + Send + Sync>;

struct Node<T> {
    value: ArrayD<T>,
    inputs: Vec<NodeId>,
    backward: Option<Backward<T>>,
    requires_grad: bool,
}

/// Append-only computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Vec::new(), None, true)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    /// First element of a node; intended for scalar nodes.
    pub fn scalar(&self, id: NodeId) -> T {
        *self.nodes[id.0].value.iter().next().expect("empty node")
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records a custom operation whose forward value has already been computed.
    pub fn apply(&mut self, inputs: &[NodeId], value: ArrayD<T>, backward: Backward<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.push(value, inputs.to_vec(), backward, requires_grad)
    }

    fn push(
        &mut self,
        value: ArrayD<T>,
        inputs: Vec<NodeId>,
        backward: Option<Backward<T>>,
        requires_grad: bool,
    ) -> NodeId {
        // Kernels rely on row-major buffers.
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().into_owned() };
        self.nodes.push(Node { value, inputs, backward, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Gradients of a scalar node with respect to every differentiable leaf.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        let seed = ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), T::one());
        self.backward_seeded(root, seed)
    }

    /// Vector-Jacobian product with an explicit output seed.
    pub fn backward_seeded(&self, root: NodeId, seed: ArrayD<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.nodes[root.0].value.shape(), "seed shape");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.inputs.iter().map(|i| &self.nodes[i.0].value).collect(),
                needs: node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[input.0].value.shape());
                match &mut grads[input.0] {
                    Some(acc) => Zip::from(acc).and(&g).for_each(|a, &b| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

pub(crate) fn scalar_array<T: Scalar>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Relative error between an analytic gradient and central differences of
    /// `f` evaluated on perturbed copies of `x`.
    pub fn max_rel_error(
        x: &ArrayD<f64>,
        analytic: &ArrayD<f64>,
        step: f64,
        mut f: impl FnMut(&ArrayD<f64>) -> f64,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = x.as_slice_memory_order().unwrap()[i];
            probe.as_slice_memory_order_mut().unwrap()[i] = orig + step;
            let up = f(&probe);
            probe.as_slice_memory_order_mut().unwrap()[i] = orig - step;
            let down = f(&probe);
            probe.as_slice_memory_order_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.as_slice_memory_order().unwrap()[i];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
            worst = worst.max(err);
        }
        worst
    }
}

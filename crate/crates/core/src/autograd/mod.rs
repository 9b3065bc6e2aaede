//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and a backward closure. Nodes are appended in creation
//! order, which is already a topological order, so [`Tape::backward`] is a
//! single reverse sweep. Gradients accumulate additively across fan-out.
//! The tape (and all intermediate values) is dropped after the step.

mod fused;
mod qrnn;
mod ops;

pub use fused::{normalize_rows, MemoryAttention, MemoryRows};

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>, &[T], &mut Grads<'_, T>)>;

struct Node<T: Float> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

struct Inner<T: Float> {
    nodes: Vec<Node<T>>,
    params: Vec<(usize, ParamId)>,
}

/// Recording of one differentiable computation.
pub struct Tape<T: Float> {
    inner: RefCell<Inner<T>>,
    grad_enabled: bool,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    pub(crate) id: usize,
    pub(crate) tape: &'t Tape<T>,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Read access to forward values during the backward sweep.
pub(crate) struct BackCtx<'a, T: Float> {
    nodes: &'a [Node<T>],
}

impl<T: Float> BackCtx<'_, T> {
    pub(crate) fn value(&self, id: usize) -> &Tensor<T> {
        &self.nodes[id].value
    }
}

/// Gradient slots, allocated lazily for nodes that need them.
pub(crate) struct Grads<'a, T: Float> {
    slots: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<T: Float> Grads<'_, T> {
    /// Mutable gradient buffer for `id`, or `None` when that node does not
    /// require a gradient.
    pub(crate) fn get(&mut self, id: usize) -> Option<&mut [T]> {
        let node = &self.nodes[id];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(self.slots[id].get_or_insert_with(|| vec![T::ZERO; n]).as_mut_slice())
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner { nodes: Vec::new(), params: Vec::new() }),
            grad_enabled: true,
        }
    }

    /// A tape for evaluation: no node requires a gradient and nothing is
    /// recorded for the backward pass.
    pub fn inference() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, false, None)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let rg = self.grad_enabled;
        self.push(value, rg, None)
    }

    /// Leaf holding a copy of a registered parameter.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let v = self.leaf(store.value(id).clone());
        self.inner.borrow_mut().params.push((v.id, id));
        v
    }

    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let requires_grad = requires_grad && self.grad_enabled;
        inner.nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var { id, tape: self }
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    pub(crate) fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[id].value)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes[..];
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut slots: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            slots[loss.id] = Some(vec![T::ONE]);
        }
        let ctx = BackCtx { nodes };
        for id in (0..=loss.id).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = slots[id].take() else {
                continue;
            };
            let mut grads = Grads { slots: &mut slots, nodes };
            backward(&ctx, &g, &mut grads);
        }
        let mut leaves = HashMap::new();
        for (id, slot) in slots.into_iter().enumerate() {
            if let Some(g) = slot {
                if nodes[id].backward.is_none() {
                    leaves.insert(id, Tensor::from_parts(nodes[id].value.shape().to_vec(), g));
                }
            }
        }
        Ok(Gradients { leaves, params: inner.params.clone() })
    }
}

/// Gradients of leaves after a backward sweep.
pub struct Gradients<T: Float> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to a leaf, if it was reached.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    /// Adds every parameter-leaf gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(node, pid) in &self.params {
            if let Some(g) = self.leaves.get(&node) {
                store.accumulate_grad(pid, g.data());
            }
        }
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value_ref(self.id)
    }

    /// Owned copy of the forward value.
    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    /// Copy of the value as a constant leaf: cuts the gradient path.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.to_tensor())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}

#[cfg(test)]
mod tests;

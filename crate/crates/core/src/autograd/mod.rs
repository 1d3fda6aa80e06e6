//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.

mod loss;
mod ops;
mod sampling;

pub use loss::FocalParams;
pub use ops::{concat_cols, concat_rows, sum_all};
pub(crate) use ops::sigmoid;
pub use sampling::{bilinear_taps, deformable_gather, BilinearTap};

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &mut Grads)>;

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Arc<Tensor>, requires_grad: bool, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), true, None)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(value, true, None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), false, None)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_> {
        self.constant(Tensor::zeros(shape))
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Records the result of an operation over `inputs`. The closure runs
    /// during the backward pass and scatters the output gradient into
    /// `Grads`; it is dropped without being stored when no input needs a
    /// gradient.
    pub(crate) fn op(
        &self,
        inputs: &[Var<'_>],
        value: Tensor,
        backward: impl Fn(&Tensor, &mut Grads) + 'static,
    ) -> Var<'_> {
        let requires = inputs.iter().any(|v| self.requires_grad(v.id));
        self.push(Arc::new(value), requires, Some(Box::new(backward)))
    }

    /// Gradient of the scalar `loss` with respect to every leaf that
    /// requires one. Intermediate gradients are released as the walk
    /// proceeds.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to a different tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads = Grads {
            slots: (0..nodes.len()).map(|_| None).collect(),
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !nodes[loss.id].requires_grad {
            return grads;
        }
        grads.slots[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads.slots[id].take() else {
                continue;
            };
            backward(&g, &mut grads);
        }
        grads
    }
}

/// Gradient accumulators indexed by node id.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.slots[v.id].as_ref()
    }

    /// Gradient of leaf `v`, zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.slots[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub(crate) fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Mutable access to the (lazily zeroed) accumulator of `id`.
    pub(crate) fn slot(&mut self, id: usize) -> Option<&mut [f64]> {
        if !self.requires[id] {
            return None;
        }
        let shape = &self.shapes[id];
        Some(
            self.slots[id]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }

    pub(crate) fn accumulate(&mut self, id: usize, g: &[f64]) {
        if let Some(s) = self.slot(id) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(self.value(), false, None)
    }
}

//! Eager reverse-mode differentiation: every operation computes its value
//! immediately and records a vector-Jacobian product on the tape.

use super::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackwardFn<T> = Box<dyn Fn(&[T], &mut BackwardCtx<'_, T>) + Send>;

struct Node<T> {
    value: Tensor<T>,
    /// Any path from this node reaches a grad-requiring leaf.
    needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Gradient buffers of the backward pass, indexed by node.
///
/// Buffers are allocated zeroed on first touch; ops accumulate into them
/// with `+=` so fan-out sums naturally.
pub struct BackwardCtx<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    needs: &'a [bool],
    sizes: &'a [usize],
}

impl<'a, T: Scalar> BackwardCtx<'a, T> {
    /// Gradient buffer of `v`, or `None` when no grad flows through it.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.needs[v.0] {
            return None;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.sizes[v.0]]);
        }
        slot.as_mut().map(|g| g.as_mut_slice())
    }
}

/// Records one forward computation; dropped after the gradients are read.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Leaf node. `requires_grad` marks it as a gradient sink.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an operation: its already-computed value, its inputs and its
    /// vector-Jacobian product. The closure receives the output gradient and
    /// accumulates into the input gradient buffers it obtains from the
    /// context (a buffer is `None` for inputs that need no gradient).
    pub fn push_op(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        backward: BackwardFn<T>,
    ) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad: needs,
            backward: if needs { Some(backward) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Whether gradients flow through `v`.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse pass from scalar `loss`. Returns per-node gradient buffers;
    /// read leaves out with [`Tape::take_grad`] on the returned store.
    pub fn backward(&self, loss: Var) -> GradStore<T> {
        assert_eq!(
            self.nodes[loss.0].value.shape().numel(),
            1,
            "backward() needs a scalar loss, got shape {}",
            self.nodes[loss.0].value.shape()
        );
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.shape().numel()).collect();
        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        // Nodes only reference earlier nodes, so reverse id order is a
        // valid reverse-topological order.
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let Some(backward) = self.nodes[id].backward.as_ref() else {
                continue; // leaf: keep its accumulated gradient
            };
            let go = grads[id].take().expect("checked above");
            let mut ctx = BackwardCtx {
                grads: &mut grads,
                needs: &needs,
                sizes: &sizes,
            };
            backward(&go, &mut ctx);
        }
        GradStore { grads }
    }
}

/// Gradients produced by one backward pass.
pub struct GradStore<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradStore<T> {
    /// Gradient of a leaf, zeros if untouched by the loss.
    pub fn grad(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.shape(v);
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take_grad(&mut self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.shape(v);
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_vec(shape, g),
            None => Tensor::zeros(shape),
        }
    }

    pub fn has_grad(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

//! Reverse-mode gradient tape.
//!
//! A [`Tape`] is rebuilt for every forward pass (define-by-run); the GRU
//! recurrence has a data-dependent iteration count, so nothing is cached
//! between passes. Nodes are recorded in topological order by construction,
//! and the backward sweep walks them in reverse, so two runs over identical
//! inputs produce bit-identical gradients.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(super) usize);

pub(super) type BackFn<T> = Box<dyn FnOnce(&[T], &mut Tape<T>)>;

pub(super) struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    back: Option<BackFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// Disables gradient recording; forward values are still computed.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            consumed: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let needs = requires_grad && self.grad_enabled;
        self.push(value, needs, None)
    }

    /// Leaf that never receives gradient (input images, constant grids).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    pub(super) fn push(
        &mut self,
        value: Tensor<T>,
        needs_grad: bool,
        back: Option<BackFn<T>>,
    ) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            back: if needs_grad { back } else { None },
        });
        Var(id)
    }

    /// Installs the backward closure after node creation (for closures that
    /// capture the output handle). No-op when the node needs no gradient.
    pub(super) fn replace_back(&mut self, v: Var, f: BackFn<T>) {
        let node = &mut self.nodes[v.0];
        if node.needs_grad {
            node.back = Some(f);
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient populated by [`Tape::backward`]; `None` if the node never
    /// received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer of `v` (no-op when the node
    /// does not require gradient).
    pub(super) fn accum(&mut self, v: Var, delta: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let buf = node
            .grad
            .get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        debug_assert_eq!(buf.len(), delta.len());
        for (g, d) in buf.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    /// Runs the reverse sweep from a scalar loss. The tape is consumed: each
    /// recorded closure fires at most once and a second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        if self.consumed {
            return Err(Error::invalid("tape already consumed by backward"));
        }
        let n = self.nodes[loss.0].value.numel();
        if n != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            let Some(back) = self.nodes[id].back.take() else {
                continue;
            };
            let gout = self.nodes[id].grad.take().expect("checked above");
            back(&gout, self);
            self.nodes[id].grad = Some(gout);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.backward(Var(0)).is_err());
        let x = tape.leaf(Tensor::from_fn(&[3], |i| i as f64), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn sum_gradient_is_ones_and_tape_consumed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[4], |i| i as f64), true);
        let s = ops::sum_all(&mut tape, x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn square_gradient_matches_analytic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = ops::mul(&mut tape, x, x).unwrap();
        let s = ops::sum_all(&mut tape, y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::from_fn(&[8], |i| 0.3 * i as f64 - 1.0), true);
            let h = ops::tanh(&mut tape, x).unwrap();
            let g = ops::sigmoid(&mut tape, h).unwrap();
            let p = ops::mul(&mut tape, g, x).unwrap();
            let s = ops::sum_all(&mut tape, p).unwrap();
            tape.backward(s).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "gradients must be bit-identical across runs");
    }
}

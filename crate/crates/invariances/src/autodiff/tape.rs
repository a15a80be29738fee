//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every operation of one forward pass as a node in a
//! flat arena. Calling [`Tape::backward`] on a scalar node sweeps the arena
//! in reverse, applying each op's saved backward rule and accumulating
//! gradients into the [`Param`] leaves. The tape is rebuilt from scratch
//! every training step; parameters persist across tapes and carry their
//! accumulated gradients until [`Param::zero_grad`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// A trainable (or otherwise gradient-receiving) tensor that outlives tapes.
///
/// Cloning a `Param` clones the *handle*; both clones see the same value and
/// gradient. Gradients accumulate across [`Tape::backward`] calls until
/// explicitly zeroed, so one logical step may sum contributions from several
/// tapes or from several uses of the same parameter on one tape.
#[derive(Clone)]
pub struct Param<T: Scalar> {
    inner: Rc<RefCell<ParamInner<T>>>,
}

struct ParamInner<T: Scalar> {
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            inner: Rc::new(RefCell::new(ParamInner {
                name: name.into(),
                value,
                grad: None,
            })),
        }
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().value.numel()
    }

    /// Clone of the current value.
    pub fn value(&self) -> Tensor<T> {
        self.inner.borrow().value.clone()
    }

    /// Read the value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.inner.borrow().value)
    }

    /// Replace the value (shape must match the old one).
    pub fn set_value(&self, value: Tensor<T>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "Param::set_value",
                lhs: inner.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        inner.value = value;
        Ok(())
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.inner.borrow().grad.clone()
    }

    /// Drop the accumulated gradient.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Add `g` into the accumulated gradient.
    pub fn accumulate_grad(&self, g: &Tensor<T>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.grad {
            Some(acc) => acc.add_assign(g),
            slot @ None => {
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }

    /// Mutate value and read gradient under one borrow (for optimizers).
    pub fn update<R>(&self, f: impl FnOnce(&mut Tensor<T>, Option<&Tensor<T>>) -> R) -> R {
        let mut inner = self.inner.borrow_mut();
        let ParamInner { value, grad, .. } = &mut *inner;
        f(value, grad.as_ref())
    }

    /// Two handles to the same underlying parameter?
    pub fn same_as(&self, other: &Param<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl<T: Scalar> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(f, "Param({:?}, shape {:?})", inner.name, inner.value.shape())
    }
}

/// Backward rule of one recorded operation.
///
/// `grad` is dL/d(output); `inputs` are the parent values in registration
/// order; `needs[i]` says whether parent `i` requires a gradient (rules may
/// skip work, and may return `None`, for parents that don't).
pub(crate) trait Op<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad: &Tensor<T>,
        output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    op: Option<Box<dyn Op<T>>>,
    requires_grad: bool,
    param: Option<Param<T>>,
}

/// Arena of one forward pass. See the module docs.
pub struct Tape<T: Scalar> {
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Clone a node's value off the tape.
    pub fn detach(&self, id: NodeId) -> Tensor<T> {
        self.nodes[id.0].value.clone()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record a constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(value, Vec::new(), None, false, None)
    }

    /// Record a trainable leaf. Its gradient is accumulated into `param`
    /// during [`Tape::backward`].
    pub fn param(&mut self, param: &Param<T>) -> NodeId {
        self.push_node(param.value(), Vec::new(), None, true, Some(param.clone()))
    }

    /// Record a parameter as a frozen constant: its current value is used,
    /// but no gradient is accumulated into it.
    pub fn frozen(&mut self, param: &Param<T>) -> NodeId {
        self.push_node(param.value(), Vec::new(), None, false, None)
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: Vec<NodeId>,
        op: Box<dyn Op<T>>,
    ) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(value, parents, Some(op), requires_grad, None)
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        parents: Vec<NodeId>,
        op: Option<Box<dyn Op<T>>>,
        requires_grad: bool,
        param: Option<Param<T>>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents,
            op,
            requires_grad,
            param,
        });
        id
    }

    /// Reverse sweep from `loss` (must be scalar). Gradients of parameter
    /// leaves are accumulated into their [`Param`]s; everything else is
    /// transient. The tape itself is unchanged and can be swept again.
    pub fn backward(&self, loss: NodeId) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(param) = &node.param {
                param.accumulate_grad(&grad)?;
            }
            let Some(op) = &node.op else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let contribs = op.backward(&grad, &node.value, &inputs, &needs)?;
            debug_assert_eq!(contribs.len(), node.parents.len(), "op {}", op.name());
            for (k, contrib) in contribs.into_iter().enumerate() {
                if !needs[k] {
                    continue;
                }
                let Some(c) = contrib else {
                    continue;
                };
                let pid = node.parents[k];
                if c.shape() != self.nodes[pid.0].value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "backward contribution",
                        lhs: c.shape().to_vec(),
                        rhs: self.nodes[pid.0].value.shape().to_vec(),
                    });
                }
                match &mut grads[pid.0] {
                    Some(acc) => acc.add_assign(&c)?,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 2]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }), "{err}");
    }

    #[test]
    fn param_gradients_accumulate_until_zeroed() {
        let p = Param::new("w", Tensor::<f64>::scalar(3.0));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&p);
            tape.backward(w).unwrap();
        }
        // two sweeps, each contributing dL/dw = 1
        assert_eq!(p.grad().unwrap().item(), 2.0);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let p = Param::new("w", Tensor::<f64>::scalar(3.0));
        let mut tape = Tape::new();
        let w = tape.frozen(&p);
        assert!(!tape.requires_grad(w));
        tape.backward(w).unwrap();
        assert!(p.grad().is_none());
    }
}

//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, so the node list is already topologically sorted and a
//! single reverse sweep visits each node once.

use std::cell::RefCell;
use std::rc::Rc;

use super::dense::Tensor;
use crate::error::TensorError;

type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            inputs: Vec::new(),
            backward: None,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push<F>(&self, value: impl Into<Rc<Tensor>>, inputs: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: value.into(),
            requires_grad,
            inputs: ids,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Propagates d(loss)/d(node) back to every trainable leaf.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`];
    /// intermediate gradients are dropped once consumed.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), TensorError> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        pending[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.backward {
                let flags: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                let grads = back(&g, &flags);
                for (&input, grad) in node.inputs.iter().zip(grads) {
                    let Some(grad) = grad else { continue };
                    match &mut pending[input] {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(grad),
                    }
                }
            }
            let node = &mut nodes[id];
            if node.backward.is_some() {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, shaped like the value. Always `None`
    /// for recorded operations.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    /// Gradient or zeros when nothing flowed into this node.
    pub fn grad_or_zeros(&self) -> Tensor {
        self.grad().unwrap_or_else(|| Tensor::zeros(&self.shape()))
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

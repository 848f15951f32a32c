//! Minimal reverse-mode autodiff: just enough ops to express the decoder
//! and its losses.
//!
//! Values are computed eagerly; each op records a backward closure on a
//! tape. A fresh tape is built per training step. Graph construction and
//! backward are single-threaded per tape; separate model instances may
//! train on separate threads.

pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod optim;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

/// Maps an upstream gradient to contributions for parent nodes.
type BackwardFn = Box<dyn Fn(&RealTensor) -> Vec<(usize, RealTensor)>>;

struct Node {
    value: Rc<RealTensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Recorded operation graph. Cloning is cheap (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// A value on the tape: a dense real tensor participating in reverse-mode
/// differentiation.
#[derive(Clone)]
pub struct DiffTensor {
    tape: Tape,
    index: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A leaf that never receives gradient (inputs, encoder outputs).
    pub fn constant(&self, value: RealTensor) -> DiffTensor {
        self.push(value, false, None)
    }

    /// A leaf that accumulates gradient (learned parameters).
    pub fn leaf(&self, value: RealTensor) -> DiffTensor {
        self.push(value, true, None)
    }

    pub(crate) fn push(
        &self,
        value: RealTensor,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> DiffTensor {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward,
        });
        DiffTensor {
            tape: self.clone(),
            index: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Backpropagate from a scalar root. Populates the gradient of every
    /// reachable gradient-requiring node exactly once per call.
    pub fn backward(&self, root: &DiffTensor) -> Result<Gradients> {
        if !self.same_as(&root.tape) {
            return Err(Error::Shape("backward root from a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root_len = nodes[root.index].value.len();
        if root_len != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {root_len} elements"
            )));
        }
        let mut grads: Vec<Option<RealTensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.index] = Some(RealTensor::scalar(1.0));
        for i in (0..=root.index).rev() {
            if grads[i].is_none() || !nodes[i].requires_grad {
                continue;
            }
            if let Some(backward) = &nodes[i].backward {
                let upstream = grads[i].as_ref().unwrap();
                for (parent, contribution) in backward(upstream) {
                    debug_assert!(parent < i, "backward edge must point to an earlier node");
                    if !nodes[parent].requires_grad {
                        continue;
                    }
                    match &mut grads[parent] {
                        Some(existing) => {
                            let sum = existing.add(&contribution)?;
                            *existing = sum;
                        }
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl DiffTensor {
    pub fn value(&self) -> Rc<RealTensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.index].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.index].requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub(crate) fn index(&self) -> usize {
        self.index
    }

    /// Scalar content; errors if the tensor has more than one element.
    pub fn scalar_value(&self) -> Result<f64> {
        let v = self.value();
        if v.len() != 1 {
            return Err(Error::Shape(format!(
                "expected scalar, got {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    }
}

pub(crate) fn check_same_tape(a: &DiffTensor, b: &DiffTensor) -> Result<()> {
    if a.tape.same_as(&b.tape) {
        Ok(())
    } else {
        Err(Error::Shape("operands recorded on different tapes".into()))
    }
}

/// Result of one backward pass.
pub struct Gradients {
    grads: Vec<Option<RealTensor>>,
}

impl Gradients {
    pub fn get(&self, t: &DiffTensor) -> Option<&RealTensor> {
        self.grads.get(t.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: &DiffTensor) -> Option<RealTensor> {
        self.grads.get_mut(t.index).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops;

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        let tape = Tape::new();
        let x = tape.leaf(RealTensor::scalar(3.0));
        let y = ops::mul(&x, &x).unwrap(); // x^2
        let z = ops::mean_all(&y).unwrap();
        let grads = tape.backward(&z).unwrap();
        let gx = grads.get(&x).unwrap();
        assert!((gx.data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(RealTensor::scalar(2.0));
        let x = tape.leaf(RealTensor::scalar(5.0));
        let y = ops::mul(&c, &x).unwrap();
        let z = ops::mean_all(&y).unwrap();
        let grads = tape.backward(&z).unwrap();
        assert!(grads.get(&c).is_none());
        assert!((grads.get(&x).unwrap().data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(RealTensor::filled(&[2], 1.0));
        assert!(tape.backward(&x).is_err());
    }
}

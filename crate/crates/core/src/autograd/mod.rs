//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation whose inputs include a tracked [`Var`].
//! Operations on untracked vars are evaluated eagerly and nothing is kept, so
//! inference through the same code path holds no intermediate activations.
//!
//! Nodes are numbered in creation order, which is a topological order: an op's
//! inputs always exist before its output. [`Var::backward`] walks the recorded
//! ops once in reverse and sums gradient contributions from every consumer.

mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

pub use gradcheck::{gradcheck, gradcheck_points, GradcheckReport, GradcheckSettings, ProbeError};
pub(crate) use gradcheck::rel_error;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Recorded<T: Scalar> {
    inputs: Vec<Option<NodeId>>,
    output: NodeId,
    backward: BackwardFn<T>,
}

/// Deliberate gradient corruption used to prove that gradient checking catches bugs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Scales the GELU input gradient by 1.5.
    GeluBackward,
}

struct TapeInner<T: Scalar> {
    shapes: Vec<Vec<usize>>,
    leaf: Vec<bool>,
    ops: Vec<Recorded<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    fault: Fault,
}

/// Ordered record of tracked operations. Cheap to clone; clones share the record.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                shapes: Vec::new(),
                leaf: Vec::new(),
                ops: Vec::new(),
                leaf_grads: Vec::new(),
                fault: Fault::None,
            })),
        }
    }

    pub fn inject_fault(&self, fault: Fault) {
        self.inner.borrow_mut().fault = fault;
    }

    pub(crate) fn fault(&self) -> Fault {
        self.inner.borrow().fault
    }

    /// Wraps `tensor` as a leaf. It is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<T> {
        self.leaf_shared(Arc::new(tensor))
    }

    pub fn leaf_shared(&self, tensor: Arc<Tensor<T>>) -> Var<T> {
        if !tensor.requires_grad() {
            return Var::from_shared(tensor);
        }
        let id = self.push_node(tensor.shape().to_vec(), true);
        Var {
            value: tensor,
            node: Some((self.clone(), id)),
        }
    }

    /// Tracked leaf regardless of the tensor's own flag.
    pub fn watch(&self, mut tensor: Tensor<T>) -> Var<T> {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().shapes.len()
    }

    pub fn num_ops(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_node(&self, shape: Vec<usize>, leaf: bool) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.shapes.push(shape);
        inner.leaf.push(leaf);
        inner.leaf_grads.push(None);
        inner.shapes.len() - 1
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn leaf_grad(&self, id: NodeId) -> Option<Vec<T>> {
        self.inner.borrow().leaf_grads[id].clone()
    }

    fn backward_from(&self, root: NodeId) {
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        let n = inner.shapes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(inner.shapes[root].clone()));
        for op in inner.ops.iter().rev() {
            if op.output > root {
                continue;
            }
            let Some(g) = grads[op.output].take() else {
                continue;
            };
            let needs: Vec<bool> = op.inputs.iter().map(Option::is_some).collect();
            let input_grads = (op.backward)(&g, &needs);
            debug_assert_eq!(input_grads.len(), op.inputs.len());
            for (input, gi) in op.inputs.iter().zip(input_grads) {
                if let (Some(id), Some(gi)) = (input, gi) {
                    debug_assert_eq!(gi.shape(), inner.shapes[*id].as_slice());
                    match &mut grads[*id] {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(gi.data())
                            .for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
        }
        for (id, g) in grads.into_iter().enumerate() {
            if !inner.leaf[id] {
                continue;
            }
            if let Some(g) = g {
                match &mut inner.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g.into_data()),
                }
            }
        }
    }
}

/// A tensor value, optionally attached to a tape node.
pub struct Var<T: Scalar> {
    value: Arc<Tensor<T>>,
    node: Option<(Tape<T>, NodeId)>,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            value: Arc::clone(&self.value),
            node: self.node.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node.as_ref().map(|(_, id)| *id))
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// Untracked value.
    pub fn constant(tensor: Tensor<T>) -> Self {
        Self::from_shared(Arc::new(tensor))
    }

    pub fn from_shared(tensor: Arc<Tensor<T>>) -> Self {
        Self {
            value: tensor,
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|(t, _)| t)
    }

    pub fn detach(&self) -> Self {
        Self::from_shared(Arc::clone(&self.value))
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Accumulated gradient of a tracked leaf after [`Var::backward`].
    pub fn grad(&self) -> Option<Tensor<T>> {
        let (tape, id) = self.node.as_ref()?;
        let g = tape.leaf_grad(*id)?;
        Tensor::new(self.shape().to_vec(), g).ok()
    }

    /// Back-propagates from this scalar. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let (tape, id) = self.node.as_ref().ok_or(Error::DetachedGraph)?;
        tape.backward_from(*id);
        Ok(())
    }

    /// Records `out` as the result of an op over `parents`.
    ///
    /// `backward(g, needs)` returns one entry per parent; entries whose
    /// `needs` flag is false may be `None`.
    pub(crate) fn record(
        out: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<T>> {
        let mut tape: Option<&Tape<T>> = None;
        for p in parents {
            if let Some((t, _)) = &p.node {
                match tape {
                    None => tape = Some(t),
                    Some(existing) if existing.same(t) => {}
                    Some(_) => {
                        return Err(Error::InvalidArgument(
                            "operands are recorded on different tapes".into(),
                        ))
                    }
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(Var::constant(out));
        };
        let id = tape.push_node(out.shape().to_vec(), false);
        let inputs = parents.iter().map(|p| p.node.as_ref().map(|(_, i)| *i)).collect();
        tape.inner.borrow_mut().ops.push(Recorded {
            inputs,
            output: id,
            backward: Box::new(backward),
        });
        Ok(Var {
            value: Arc::new(out),
            node: Some((tape.clone(), id)),
        })
    }
}

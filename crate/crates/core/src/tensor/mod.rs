//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The design favours auditability over speed: row-major `Vec<f64>` storage,
//! a dynamic graph rebuilt on every step, and one backward closure per op.
//! A [`Tensor`] is a cheap `Rc` handle; ops allocate a fresh node holding its
//! parents and a closure that maps the upstream gradient into per-parent
//! gradient buffers. [`Tensor::backward`] walks the graph in reverse
//! topological order and accumulates into `grad` on every node that requires
//! gradients. Repeated backward calls keep accumulating, mirroring the usual
//! deep-learning convention; [`Tensor::zero_grad`] resets.
//!
//! Nodes whose parents all have `requires_grad == false` are constant-folded:
//! no parents or closure are stored, so inference builds no graph.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

mod conv;
mod fft;
mod ops;
mod optim;
mod special;

pub use conv::conv1d;
pub use fft::{irfft, rfft, ComplexTensor};
pub use ops::sigmoid_scalar;
pub use optim::{zero_grads, Adam, AdamConfig, Parameter};
pub use special::{s3_shuffle, spectral_gate};

/// Errors surfaced by tensor construction, ops, and the backward pass.
///
/// Shape mistakes that indicate a programming bug (e.g. element-wise ops on
/// incompatible shapes) panic instead; `TensorError` is reserved for
/// conditions a caller may legitimately need to handle or report.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("no gradient recorded for parameter {0}")]
    MissingGrad(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

thread_local! {
    // Node ids only need to be unique within a thread: graphs are never
    // shared across threads (Tensor is !Send by construction).
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let v = c.get();
        c.set(v + 1);
        v
    })
}

/// Maps the upstream gradient of a node into zero-initialised buffers, one
/// per parent (same element counts as the parents' data).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut [Vec<f64>])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense row-major f64 tensor; cloning copies the handle, not the data.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) {
    let expect: usize = shape.iter().product();
    assert_eq!(
        expect, len,
        "data length {len} does not match shape {shape:?} (needs {expect})"
    );
}

impl Tensor {
    /// Constant tensor: never records gradients.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Self {
        check_len(shape, data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Trainable leaf: `backward` accumulates into its `grad`.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Self {
        check_len(shape, data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad: true,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Rank-0 constant scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor::constant(&[], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor::constant(shape, vec![0.0; len])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor::constant(shape, vec![value; len])
    }

    /// Internal op-node constructor. Folds to a constant when no parent
    /// requires gradients, dropping both parents and closure.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        check_len(&shape, data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow of the raw data. Do not hold across op calls on `self`.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let data = self.inner.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.shape());
        data[0]
    }

    /// Overwrites leaf data in place (optimizer updates, finite differences).
    pub fn set_data(&self, values: &[f64]) {
        let mut data = self.inner.data.borrow_mut();
        assert_eq!(values.len(), data.len(), "set_data length mismatch");
        data.copy_from_slice(values);
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Constant copy of this tensor's current values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.shape(), self.to_vec())
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar loss. Accumulates `grad` on every
    /// node with `requires_grad` reachable from `self`; gradients from
    /// earlier backward calls are kept and added to.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        let order = topo_order(self);
        // Per-call gradient flow is kept separate from the persistent
        // accumulators so a second backward never re-propagates stale grads.
        let mut flowing: HashMap<u64, Vec<f64>> = HashMap::new();
        flowing.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = flowing.remove(&node.id()) else {
                continue;
            };
            if node.requires_grad() {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(backward) = &node.inner.backward {
                let mut bufs: Vec<Vec<f64>> = node
                    .inner
                    .parents
                    .iter()
                    .map(|p| vec![0.0; p.len()])
                    .collect();
                backward(&g, &mut bufs);
                for (parent, buf) in node.inner.parents.iter().zip(bufs) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    match flowing.entry(parent.id()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&buf) {
                                *a += b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(buf);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order DFS over parent edges; reversing the result visits each node
/// before any of its parents. Iterative to keep deep graphs off the stack.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    visited.insert(root.id());
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((node, next_parent)) = stack.pop() {
        if next_parent < node.inner.parents.len() {
            let parent = node.inner.parents[next_parent].clone();
            stack.push((node, next_parent + 1));
            if visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array in row-major order.
//! Operations on tensors that require gradients record a node holding the
//! parent tensors and a one-shot backward closure; [`Tensor::backward`]
//! replays those nodes in reverse topological order and accumulates
//! gradients into every participating tensor. The recorded graph is
//! consumed by backward, so each forward pass differentiates exactly once.

mod conv;
mod gradcheck;
mod ops;
pub(crate) mod serial;

pub use conv::{adaptive_avg_pool2d, avg_pool2d, batch_norm, conv2d, conv2d_asym,
               conv_transpose2d, separable_conv2d, upsample_nearest, BnMode, BnStats, Conv2dGeom};
pub use gradcheck::grad_check;
pub use serial::{read_tensor_record, write_tensor_record};

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule of one recorded operation.
///
/// Arguments: the op's output tensor, its parents, and the gradient flowing
/// into the output. Returns one optional gradient per parent (None when the
/// parent does not require grad).
type BackwardFn = Box<dyn FnOnce(&Tensor, &[Tensor], &[f64]) -> Vec<Option<Vec<f64>>> + Send>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Mutex<Option<Node>>,
    /// Set once the node has been consumed by a backward pass.
    consumed: AtomicBool,
    /// Set once this tensor served as a backward root.
    backward_done: AtomicBool,
}

/// Handle to an immutable tensor; clones share storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {numel} values but {len} were provided"
        )));
    }
    Ok(())
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values,
                requires_grad,
                grad: Mutex::new(None),
                node: Mutex::new(node),
                consumed: AtomicBool::new(false),
                backward_done: AtomicBool::new(false),
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, values.len())?;
        Ok(Self::from_parts(shape.to_vec(), values, false, None))
    }

    /// Leaf tensor that accumulates gradients during backward.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, values.len())?;
        Ok(Self::from_parts(shape.to_vec(), values, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()], false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::from_parts(shape.to_vec(), vec![1.0; shape.iter().product()], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::from_parts(vec![1], vec![value], false, None)
    }

    /// Gaussian leaf with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), values, false, None)
    }

    /// Internal constructor for op outputs. Records a node only when some
    /// parent participates in differentiation.
    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let track = parents.iter().any(|p| p.inner.requires_grad);
        let node = track.then_some(Node { parents, backward });
        Self::from_parts(shape, values, track, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Stable identity of the underlying storage.
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Extract the value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.values[0])
    }

    /// Copy of the accumulated gradient, if backward has produced one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// Take the accumulated gradient, leaving none behind.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().take()
    }

    /// Detached leaf copy (same values, no graph, no grad tracking).
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.inner.shape.clone(), self.inner.values.clone(), false, None)
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode differentiation from a scalar root.
    ///
    /// Populates `grad` on every tensor with `requires_grad` that
    /// participated in the graph. The recorded nodes are consumed, so a
    /// second backward on the same graph is rejected.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarBackward(self.shape().to_vec()));
        }
        if self.inner.backward_done.swap(true, Ordering::SeqCst) {
            return Err(Error::GraphConsumed);
        }
        if self.inner.consumed.load(Ordering::SeqCst) {
            return Err(Error::GraphConsumed);
        }

        let order = self.topo_order()?;
        self.accumulate_grad(&[1.0]);

        for t in order {
            let node = t.inner.node.lock().unwrap().take();
            let Some(node) = node else { continue };
            t.inner.consumed.store(true, Ordering::SeqCst);
            let gy = t
                .inner
                .grad
                .lock()
                .unwrap()
                .clone()
                .expect("topological order guarantees a gradient before expansion");
            let parent_grads = (node.backward)(&t, &node.parents, &gy);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.len(), parent.numel());
                    if parent.inner.requires_grad {
                        parent.accumulate_grad(&pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Reverse post-order over the graph rooted at self: every tensor
    /// appears before all of its parents.
    fn topo_order(&self) -> Result<Vec<Tensor>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // Iterative DFS; (tensor, expanded) pairs emulate post-order.
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.inner.id) {
                continue;
            }
            if t.inner.consumed.load(Ordering::SeqCst) {
                return Err(Error::GraphConsumed);
            }
            stack.push((t.clone(), true));
            let node = t.inner.node.lock().unwrap();
            if let Some(node) = node.as_ref() {
                for p in &node.parents {
                    if !visited.contains(&p.inner.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order.reverse();
        Ok(order)
    }

    /// Row-major strides for this tensor's shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.inner.shape)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Every operation that has at least one input requiring a gradient records
//! its inputs and whatever intermediates the backward pass needs. The graph is
//! owned by the tensors themselves, so dropping the last handle to a loss
//! drops its tape. [`GradTape::record`] linearizes the reachable graph in
//! creation order, which is always a topological order because a node can
//! only be created after its inputs.
//!
//! [`Tensor::detach`] produces a tensor that shares the value buffer of its
//! source but records no edge back to it. Nothing upstream of a detached
//! tensor can receive gradient through it.
//!
//! ```
//! use ew_core::tensor::Tensor;
//!
//! let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
//! let w = Tensor::param(vec![3.0, 4.0], &[2]).unwrap();
//! let loss = x.detach().mul(&w).unwrap().sum();
//! loss.backward();
//! assert_eq!(x.grad_or_zeros(), vec![0.0, 0.0]);
//! assert_eq!(w.grad_or_zeros(), vec![1.0, 2.0]);
//! ```

mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub(crate) use ops::Op;
pub use ops::PAD_INDEX;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Runs `f` without recording any operation on the tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
        }
    }
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let _guard = Guard;
    f()
}

pub fn is_grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    detached: bool,
    op: Option<Op>,
    grad: Mutex<Option<Vec<f64>>>,
}

/// Reference-counted handle to an immutable tensor node.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("detached", &self.0.detached)
            .field("op", &self.0.op.as_ref().map(|o| o.name()))
            .finish()
    }
}

fn check_len(data: &[f64], shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!(
            "buffer of {} elements does not fill shape {:?}",
            data.len(),
            shape
        )));
    }
    Ok(())
}

impl Tensor {
    fn make(
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        requires_grad: bool,
        detached: bool,
        op: Option<Op>,
    ) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            detached,
            op,
            grad: Mutex::new(None),
        }))
    }

    /// Constant tensor (never receives a gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::make(Arc::new(data), shape.to_vec(), false, false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::make(Arc::new(data), shape.to_vec(), true, false, None))
    }

    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if requires_grad {
            Self::param(data, shape)
        } else {
            Self::new(data, shape)
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::make(Arc::new(vec![0.0; n]), shape.to_vec(), false, false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::make(Arc::new(vec![value]), Vec::new(), false, false, None)
    }

    /// Constant filled with standard normal draws.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::make(Arc::new(data), shape.to_vec(), false, false, None)
    }

    /// Builds the output of an operation, recording `op` only when grad mode
    /// is on and some input participates in differentiation.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let track = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if track {
            Self::make(Arc::new(data), shape, true, false, Some(op))
        } else {
            Self::make(Arc::new(data), shape, false, false, None)
        }
    }

    /// View with a new shape over the same buffer.
    pub(crate) fn from_shared(&self, shape: Vec<usize>, op: Op) -> Self {
        let track = is_grad_enabled() && self.requires_grad();
        if track {
            Self::make(self.0.data.clone(), shape, true, false, Some(op))
        } else {
            Self::make(self.0.data.clone(), shape, false, false, None)
        }
    }

    /// Same values, no backward edge. The result never accumulates a gradient.
    pub fn detach(&self) -> Tensor {
        Self::make(self.0.data.clone(), self.0.shape.clone(), false, true, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_detached(&self) -> bool {
        self.0.detached
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// True when both handles point at the same value buffer.
    pub fn shares_data_with(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0.data, &other.0.data)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    /// Backpropagates from this tensor with a seed gradient of ones.
    pub fn backward(&self) {
        let seed = vec![1.0; self.numel()];
        GradTape::record(self).run_backward(self, seed);
    }

    /// Backpropagates with an explicit seed gradient.
    pub fn backward_with(&self, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(Error::Dimension {
                op: "backward_with",
                lhs: self.shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        GradTape::record(self).run_backward(self, seed);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn stats(&self) -> TensorStats {
        TensorStats::of(self.data())
    }
}

/// Summary used in diagnostics when a loss goes non-finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorStats {
    pub len: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub non_finite: usize,
}

impl TensorStats {
    pub fn of(data: &[f64]) -> Self {
        let finite: Vec<f64> = data.iter().copied().filter(|v| v.is_finite()).collect();
        let (min, max) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let mean = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        TensorStats {
            len: data.len(),
            min,
            max,
            mean,
            non_finite: data.len() - finite.len(),
        }
    }
}

impl fmt::Display for TensorStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "len={} min={:e} max={:e} mean={:e} non_finite={}",
            self.len, self.min, self.max, self.mean, self.non_finite
        )
    }
}

/// One recorded operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapeEntry {
    pub op: &'static str,
    pub inputs: Vec<u64>,
    pub output: u64,
}

/// The differentiable part of a graph, ordered by creation (topological).
pub struct GradTape {
    nodes: Vec<Tensor>,
}

impl GradTape {
    /// Collects every node reachable from `root` that requires a gradient.
    pub fn record(root: &Tensor) -> Self {
        let mut nodes = Vec::new();
        if !root.requires_grad() {
            return GradTape { nodes };
        }
        let mut seen = HashSet::new();
        let mut stack = vec![root.clone()];
        seen.insert(root.id());
        while let Some(t) = stack.pop() {
            if let Some(op) = t.op() {
                for p in op.parents() {
                    if p.requires_grad() && seen.insert(p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.id());
        GradTape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation records in forward order; leaves are omitted.
    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .filter_map(|t| {
                t.op().map(|op| TapeEntry {
                    op: op.name(),
                    inputs: op.parents().iter().map(|p| p.id()).collect(),
                    output: t.id(),
                })
            })
            .collect()
    }

    /// Ids in the order the backward pass visits them.
    pub fn backward_order(&self) -> Vec<u64> {
        self.nodes.iter().rev().map(|t| t.id()).collect()
    }

    fn run_backward(&self, root: &Tensor, seed: Vec<f64>) {
        if self.nodes.is_empty() {
            return;
        }
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(root.id(), seed);
        for node in self.nodes.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(op) = node.op() {
                for (parent, pg) in op.backward(&node.0, &g) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.id(), pg);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.lock().expect("grad lock");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
    }
}

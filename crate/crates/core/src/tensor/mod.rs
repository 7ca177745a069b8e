//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every op output remembers its parents and a backward closure. Calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients into every leaf that requires them.
//! Intermediate gradients are dropped as soon as they have been propagated.

mod checkpoint;
mod conv;
mod gemm;
pub mod gradcheck;
mod loss;
mod lstm;
mod ops;
mod optim;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use rand::Rng;

use crate::error::{dim_err, Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use conv::{adaptive_avg_pool2d, conv2d, conv_out_size, max_pool2d, pool_out_size};
pub use gemm::gemm;
pub use loss::{cross_entropy, mse, Reduction};
pub use lstm::{lstm_cell, LstmParams};
pub use ops::dense;
pub use optim::{LrSchedule, OptimKind, Optimizer};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph, the way inference should.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Given the upstream gradient and a per-parent "needs gradient" mask, returns
/// one optional gradient buffer per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: AtomicBool,
    grad_fn: Option<GradFn>,
}

/// Shared handle to a dense row-major tensor.
///
/// Cloning is cheap and aliases the same storage. Use [`Tensor::deep_clone`]
/// for an independent copy.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name))
            .field("data", &preview)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad: AtomicBool::new(requires_grad),
            grad_fn,
        }))
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err!("shape {shape:?} has a zero dimension"));
        }
        if numel_of(shape) != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {} values, got {}",
                numel_of(shape),
                data.len()
            ));
        }
        Ok(Self::from_node(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self::from_node(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_node(vec![1], vec![value], false, None)
    }

    /// Uniform samples in `[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape)).map(|_| rng.random_range(low..high)).collect();
        Self::from_node(shape.to_vec(), data, false, None)
    }

    /// Builds an op output. The graph edge is only recorded when gradients are
    /// enabled and at least one parent requires a gradient.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len(), "{name} produced a malformed buffer");
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::from_node(shape, data, false, None);
        }
        let grad_fn = GradFn {
            name,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Box::new(backward),
        };
        Self::from_node(shape, data, true, Some(grad_fn))
    }

    /// Marks a leaf as trainable. Returns `self` for chaining.
    pub fn requires_grad_(self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    /// Freezing or unfreezing only applies to leaves; op outputs inherit it.
    pub fn set_requires_grad(&self, flag: bool) {
        assert!(self.is_leaf(), "requires_grad can only be toggled on leaf tensors");
        self.0.requires_grad.store(flag, Ordering::Relaxed);
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.load(Ordering::Relaxed)
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.data()[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Overwrites a leaf's values in place. The shape is fixed.
    pub fn set_data(&self, values: Vec<f64>) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Usage("cannot overwrite the value of an op output".into()));
        }
        if values.len() != self.numel() {
            return Err(dim_err!("set_data: expected {} values, got {}", self.numel(), values.len()));
        }
        *self.0.data.write().expect("tensor data lock poisoned") = values;
        Ok(())
    }

    pub(crate) fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        let mut guard = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut guard)
    }

    /// A new leaf sharing nothing with `self`; keeps `requires_grad`.
    pub fn deep_clone(&self) -> Self {
        Self::from_node(self.0.shape.clone(), self.to_vec(), self.is_leaf() && self.requires_grad(), None)
    }

    /// A non-trainable leaf holding a copy of the values.
    pub fn detach(&self) -> Self {
        Self::from_node(self.0.shape.clone(), self.to_vec(), false, None)
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} contains NaN or Inf")))
        }
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate (sum)
    /// across calls until [`Tensor::zero_grad`]; leaves the loss does not
    /// depend on are left untouched.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        self.ensure_finite("loss")?;
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    if node.requires_grad() {
                        if g.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite(format!(
                                "gradient for leaf of shape {:?}",
                                node.shape()
                            )));
                        }
                        node.accumulate_grad(&g);
                    }
                }
                Some(gf) => {
                    let mask: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
                    let parent_grads = (gf.backward)(&g, &mask);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{} backward arity", gf.name);
                    for ((parent, pg), needed) in gf.parents.iter().zip(parent_grads).zip(&mask) {
                        let (Some(pg), true) = (pg, *needed) else { continue };
                        debug_assert_eq!(pg.len(), parent.numel(), "{} gradient size", gf.name);
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` through gradient-requiring edges, parents
    /// before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children_pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = &node.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// FNV-1a over the raw bit patterns; used to prove parameters did not move.
pub fn checksum(tensors: &[Tensor]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for dim in t.shape() {
            for byte in (*dim as u64).to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        for v in t.data().iter() {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    hash
}

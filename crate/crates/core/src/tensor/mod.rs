//! Dense row-major tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation that touches a tensor with `requires_grad` appends a
//! [`Record`] to the output node holding its inputs and a backward rule.
//! [`Tensor::backward`] walks the records reachable from a scalar loss in
//! reverse topological order and adds gradients into every `requires_grad`
//! tensor it meets. Gradients accumulate until [`Tensor::zero_grad`].

mod element;
pub mod gradcheck;
mod kernels;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

use rand::Rng;
use rand_distr::StandardNormal;

pub use element::{DType, Element};

use crate::error::{shape_err, Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule: given the output value and its gradient, produce a
/// gradient for each input (or `None` where `needs[i]` is false).
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct Record<T: Element> {
    kind: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
    record: Option<Record<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Element = f32> {
    node: Arc<Node<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<T> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.record.as_ref().map(|r| r.kind))
            .field("data", &preview)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn with_node(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        record: Option<Record<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad,
                record,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self::with_node(shape.to_vec(), data, false, None))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self::with_node(vec![], vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::with_node(shape.to_vec(), vec![T::zero(); n], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::with_node(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Self::with_node(shape.to_vec(), data, false, None)
    }

    /// A leaf that participates in differentiation.
    pub fn param(self) -> Self {
        let data = self.to_vec();
        Self::with_node(self.node.shape.clone(), data, true, None)
    }

    /// A copy cut loose from the graph.
    pub fn detach(&self) -> Self {
        Self::with_node(self.node.shape.clone(), self.to_vec(), false, None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        kind: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let record = track.then(|| Record {
            kind,
            inputs,
            backward,
        });
        Self::with_node(shape, data, track, record)
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.record.is_none()
    }

    pub fn op_kind(&self) -> Option<&'static str> {
        self.node.record.as_ref().map(|r| r.kind)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.node.data.read().expect("tensor data lock poisoned")
    }

    /// Mutable access for optimizers and checkpoint loading. Shape is fixed.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<T>> {
        self.node.data.write().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.data()[0])
    }

    pub fn set_data(&self, values: &[T]) -> Result<()> {
        let mut data = self.data_mut();
        if data.len() != values.len() {
            return Err(shape_err!(
                "cannot assign {} values into tensor of shape {:?}",
                values.len(),
                self.shape()
            ));
        }
        data.copy_from_slice(values);
        Ok(())
    }

    fn grad_lock(&self) -> MutexGuard<'_, Option<Vec<T>>> {
        self.node.grad.lock().expect("tensor grad lock poisoned")
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.grad_lock().clone()
    }

    /// Borrows the accumulated gradient without copying it.
    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[T]>) -> R) -> R {
        f(self.grad_lock().as_deref())
    }

    pub fn grad_tensor(&self) -> Option<Tensor<T>> {
        self.grad()
            .map(|g| Self::with_node(self.node.shape.clone(), g, false, None))
    }

    pub fn zero_grad(&self) {
        *self.grad_lock() = None;
    }

    fn accumulate_grad(&self, g: Vec<T>) {
        let mut slot = self.grad_lock();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e = *e + v;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode pass from a scalar loss.
    ///
    /// Each record is visited once, after all of its consumers.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward() on a tensor that does not require grad".into(),
            ));
        }

        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(rec) = &node.node.record {
                let needs: Vec<bool> = rec.inputs.iter().map(|t| t.requires_grad()).collect();
                let input_grads = {
                    let out = node.data();
                    (rec.backward)(&out, &g, &needs)
                };
                for ((input, ig), need) in rec.inputs.iter().zip(input_grads).zip(&needs) {
                    let (Some(ig), true) = (ig, *need) else {
                        continue;
                    };
                    debug_assert_eq!(ig.len(), input.numel(), "grad size for {}", rec.kind);
                    match pending.get_mut(&input.id()) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&ig) {
                                *a = *a + *v;
                            }
                        }
                        None => {
                            pending.insert(input.id(), ig);
                        }
                    }
                }
            }
            node.accumulate_grad(g);
        }
        Ok(())
    }

    /// Nodes reachable through `requires_grad` edges, inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // (tensor, children already expanded)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(rec) = &t.node.record {
                for input in rec.inputs.iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// NumPy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("shapes {:?} and {:?} do not broadcast", a, b)),
        };
    }
    Ok(out)
}

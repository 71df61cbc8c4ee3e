//! A small reverse-mode automatic differentiation engine over dense `f64` tensors.
//!
//! Every operation in [`ops`] produces a new [`Tensor`]. When at least one input
//! requires a gradient (and gradient recording is enabled on the current thread),
//! the output carries a [`GraphNode`] holding its inputs and a backward closure.
//! [`Tensor::backward`] walks that graph in reverse topological order and
//! accumulates `d loss / d tensor` into every reachable tensor that requires one.
//!
//! Gradients accumulate additively; callers zero them explicitly between steps.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

pub mod gradcheck;
pub mod ops;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, ParamCheck};
pub use ops::{add_all, concat, concat_cols};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static CORRUPT_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with gradient recording disabled on the current thread.
///
/// Operations executed inside produce constant tensors with no graph node.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Negative-control switch for the gradient checker: while set, the backward
/// pass scales the right-hand gradient of every `matmul` by 1.5.
#[doc(hidden)]
pub fn set_corrupt_backward(on: bool) {
    CORRUPT_BACKWARD.with(|c| c.set(on));
}

fn corrupt_backward() -> bool {
    CORRUPT_BACKWARD.with(|c| c.get())
}

pub(crate) struct BackwardArgs<'a> {
    pub grad: &'a [f64],
    pub output: &'a [f64],
    pub inputs: &'a [Tensor],
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static>;

/// Backward-graph record of the operation that produced a tensor.
pub struct GraphNode {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

impl GraphNode {
    pub fn op(&self) -> &'static str {
        self.op
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }
}

struct TensorInner {
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    requires_grad: AtomicBool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<GraphNode>,
}

/// An n-dimensional row-major `f64` array with an optional gradient.
///
/// Cloning a `Tensor` clones the handle, not the storage: parameter tensors are
/// shared between the modules that use them and the [`ParamRegistry`](crate::params::ParamRegistry).
#[derive(Clone)]
pub struct Tensor(Arc<TensorInner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if data.len() <= 16 {
            s.field("data", &&data[..]);
        }
        s.field("requires_grad", &self.requires_grad());
        if let Some(node) = &self.0.node {
            s.field("op", &node.op);
        }
        s.finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::usage(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::raw(shape.to_vec(), data, false, None))
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(Vec::new(), vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    /// A leaf tensor that requires a gradient.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn with_requires_grad(self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<GraphNode>) -> Self {
        Tensor(Arc::new(TensorInner {
            shape,
            data: RwLock::new(data),
            requires_grad: AtomicBool::new(requires_grad),
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Builds the output of an operation, recording a graph node when any input
    /// requires a gradient and recording is enabled.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        backward: impl Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}");
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Self::raw(shape, data, false, None);
        }
        let node = GraphNode {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        };
        Self::raw(shape, data, true, Some(node))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        let data = self.data();
        if data.len() != 1 {
            return Err(Error::usage(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.load(Ordering::Relaxed)
    }

    /// Marks a leaf as trainable or frozen. Frozen tensors never accumulate gradient.
    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.store(on, Ordering::Relaxed);
        if !on {
            *self.0.grad.lock() = None;
        }
    }

    pub fn node(&self) -> Option<&GraphNode> {
        self.0.node.as_ref()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.lock().is_some()
    }

    /// Sets the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&self) {
        if self.requires_grad() {
            *self.0.grad.lock() = Some(vec![0.0; self.numel()]);
        }
    }

    pub fn clear_grad(&self) {
        *self.0.grad.lock() = None;
    }

    /// Overwrites the gradient buffer directly, bypassing the trainable flag.
    pub fn set_grad(&self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::Dimension {
                op: "set_grad",
                lhs: self.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        *self.0.grad.lock() = Some(grad);
        Ok(())
    }

    fn accumulate_grad(&self, g: &[f64]) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.0.grad.lock();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Replaces the stored values in place. Used by optimizers and checkpoint loading;
    /// must not race with a forward pass reading the same tensor.
    pub fn assign(&self, values: &[f64]) -> Result<()> {
        let mut data = self.0.data.write();
        if data.len() != values.len() {
            return Err(Error::Dimension {
                op: "assign",
                lhs: self.shape().to_vec(),
                rhs: vec![values.len()],
            });
        }
        data.copy_from_slice(values);
        Ok(())
    }

    pub fn update(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.write())
    }

    /// True when both handles point at the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// A gradient-free copy of the current values.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.0.shape.clone(), self.to_vec(), false, None)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode differentiation from this scalar.
    ///
    /// Adds `d self / d t` to the gradient of every reachable tensor `t` that
    /// requires one. A tensor feeding several consumers receives the sum of the
    /// path gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let corrupt = corrupt_backward();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            t.accumulate_grad(&g);
            let Some(node) = &t.0.node else {
                continue;
            };
            let input_grads = {
                let out = t.data();
                (node.backward)(&BackwardArgs {
                    grad: &g,
                    output: &out,
                    inputs: &node.inputs,
                })
            };
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (i, (input, ig)) in node.inputs.iter().zip(input_grads).enumerate() {
                let Some(mut ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                if corrupt && node.op == "matmul" && i == 1 {
                    ig.iter_mut().for_each(|v| *v *= 1.5);
                }
                match pending.get_mut(&input.key()) {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(input.key(), ig);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the gradient-requiring subgraph: inputs precede consumers.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

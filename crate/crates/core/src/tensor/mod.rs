//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tensor`] is a cheap, clonable handle to an n-dimensional array stored
//! row-major. Operations on tensors that require gradients record a backward
//! rule together with their inputs; calling [`Tensor::backward`] on a scalar
//! result walks that graph once in reverse topological order and accumulates
//! `d loss / d leaf` into every leaf that requires gradients.
//!
//! Activations use the layout `channels x height x width`.
//!
//! ```
//! use pseg::tensor::Tensor;
//!
//! let w = Tensor::leaf(vec![3], vec![1.0, -2.0, 0.5]);
//! let loss = w.mul(&w)?.sum()?.scale(0.5)?;
//! loss.backward()?;
//! assert_eq!(w.grad().unwrap(), vec![1.0, -2.0, 0.5]);
//! # Ok::<(), pseg::Error>(())
//! ```

mod ops;
pub(crate) mod kink;


pub use ops::{Conv2dOptions, UpsampleTaps};

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{Error, Result};

/// Backward rule: maps the gradient of the op output to one optional
/// gradient per recorded input (`None` for inputs that do not need one).
pub type BackwardFn = dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync;

struct Node {
    inputs: Vec<Tensor>,
    backward: Box<BackwardFn>,
}

struct Inner {
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

impl Drop for Inner {
    // Unlinks long histories iteratively so dropping a deep graph cannot
    // exhaust the stack.
    fn drop(&mut self) {
        let Some(node) = self.node.take() else { return };
        let Node { inputs, backward } = node;
        drop(backward);
        let mut stack = inputs;
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.0) {
                if let Some(node) = inner.node.take() {
                    let Node { inputs, backward } = node;
                    drop(backward);
                    stack.extend(inputs);
                }
            }
        }
    }
}

/// Shared handle to a tensor value, its gradient buffer and its recorded
/// history. Cloning is cheap and aliases the same storage.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// While alive, operations on the current thread do not record history.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = NO_GRAD.with(|f| f.replace(true));
        Self { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.with(|f| f.set(self.prev));
    }
}

fn grad_enabled() -> bool {
    !NO_GRAD.with(|f| f.get())
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        assert!(shape.iter().all(|&d| d > 0), "zero extent in shape {shape:?}");
        Tensor(Arc::new(Inner {
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            node,
        }))
    }

    /// Constant tensor (no gradient). Panics if `shape` does not match `data`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::from_parts(shape, data, false, None)
    }

    /// Fallible constructor for shapes coming from outside the program.
    pub fn try_new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::new(shape, data))
    }

    /// Gradient-tracking leaf with a zeroed gradient buffer.
    pub fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n = data.len();
        let t = Self::from_parts(shape, data, true, None);
        *t.0.grad.lock().unwrap() = Some(vec![0.0; n]);
        t
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value])
    }

    /// Builds the output of a custom operation. When any input requires
    /// gradients (and recording is enabled) `backward` is attached and will be
    /// called with the output gradient during [`Tensor::backward`]. It must
    /// return one entry per input, in order.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        backward: Box<BackwardFn>,
    ) -> Self {
        if grad_enabled() && inputs.iter().any(Tensor::requires_grad) {
            Self::from_parts(shape, data, true, Some(Node { inputs, backward }))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Read access to the flat row-major values.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().unwrap()
    }

    /// Write access to the values. Meant for optimizers, initialisers and
    /// finite-difference probes; mutating a tensor that a live graph depends
    /// on invalidates that graph's backward pass.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<f64>> {
        self.0.data.write().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().unwrap().clone()
    }

    /// Replaces the gradient buffer.
    pub fn set_grad(&self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.numel() {
                return Err(Error::Dimension(format!(
                    "gradient of {} values for tensor of shape {:?}",
                    g.len(),
                    self.shape()
                )));
            }
        }
        *self.0.grad.lock().unwrap() = grad;
        Ok(())
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.lock().unwrap().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Detached copy: same values, no history, no gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.to_vec())
    }

    /// True when both handles point at the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Back-propagates from a single-element tensor. Gradients are added to
    /// the existing buffers of every reachable leaf; callers zero them
    /// between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    let mut slot = t.0.grad.lock().unwrap();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let grads = (node.backward)(&g);
                    debug_assert_eq!(grads.len(), node.inputs.len());
                    for (input, grad) in node.inputs.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), input.numel());
                        match pending.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.key(), grad);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the nodes reachable through gradient-requiring edges.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // (tensor, children_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data();
        let preview: Vec<f64> = d.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

/// A named, trainable leaf tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let name = name.into();
        assert!(!name.is_empty(), "parameter name must be non-empty");
        Self {
            name,
            tensor: Tensor::leaf(shape, data),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    /// Overwrites the values in place, keeping the gradient buffer.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        let mut d = self.tensor.data_mut();
        if d.len() != values.len() {
            return Err(Error::Dimension(format!(
                "parameter {} holds {} values, got {}",
                self.name,
                d.len(),
                values.len()
            )));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    pub fn fill(&self, value: f64) {
        self.tensor.data_mut().iter_mut().for_each(|v| *v = value);
    }
}

impl std::ops::Deref for Parameter {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        &self.tensor
    }
}

//! Dense `f64` tensors with a dynamically recorded reverse-mode graph.
//!
//! A [`Tensor`] is an immutable value plus, when it depends on a parameter,
//! the closure that maps its output gradient to gradients of its inputs.
//! Calling [`Tensor::backward`] on a scalar walks that graph once in reverse
//! topological order and adds `dLoss/dLeaf` into every parameter leaf's
//! gradient buffer. Gradient buffers are never cleared implicitly; callers
//! zero them between steps with [`Tensor::zero_grad`].
//!
//! Inputs to `log`, `sqrt` and division denominators are clamped to at least
//! [`CLAMP_MIN`]; negative `log`/`sqrt` inputs are a domain error.

mod broadcast;
mod gemm;
mod nn;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use nn::Activation;

/// Lower bound applied to `log`, `sqrt` and division inputs.
pub const CLAMP_MIN: f64 = 1e-12;

pub(crate) type GradFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
    static FREEZE: RefCell<Option<Freeze>> = const { RefCell::new(None) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
}

/// Dense n-dimensional array of `f64` with an optional gradient trace.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        grad_fn: Option<GradFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            grad_fn,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::build(data, shape.to_vec(), false, Vec::new(), None))
    }

    /// Trainable leaf: gradients accumulate into it on `backward`.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::build(data, shape.to_vec(), true, Vec::new(), None))
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::build(vec![value], Vec::new(), false, Vec::new(), None)
    }

    pub fn from_slice(data: &[f64]) -> Tensor {
        Self::build(data.to_vec(), vec![data.len()], false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::build(vec![value; numel(shape)], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(shape, 1.0)
    }

    /// Standard-normal samples.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
        let data = (0..numel(shape)).map(|_| rng.sample(StandardNormal)).collect();
        Self::build(data, shape.to_vec(), false, Vec::new(), None)
    }

    /// Records the result of a differentiable operation. Parents that do not
    /// require gradients are dropped together with the closure.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Tensor {
        let tracked = !grad_disabled() && parents.iter().any(Tensor::requires_grad);
        if tracked {
            Self::build(data, shape, true, parents, Some(grad_fn))
        } else {
            Self::build(data, shape, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Accumulated gradient of a parameter leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Same value, cut out of the gradient graph.
    ///
    /// While a [`Freeze`] recording is active the value is captured; during a
    /// replay the captured value is returned instead of `self`, which lets
    /// finite differences see the same frozen quantities as the analytic pass.
    pub fn stop_gradient(&self) -> Tensor {
        let replayed = FREEZE.with(|f| match f.borrow_mut().as_mut() {
            Some(Freeze::Recording(values)) => {
                values.push(self.to_vec());
                None
            }
            Some(Freeze::Replaying { values, cursor }) => {
                let v = values.get(*cursor).cloned();
                *cursor += 1;
                v
            }
            None => None,
        });
        let data = match replayed {
            Some(v) if v.len() == self.numel() => v,
            _ => self.to_vec(),
        };
        Self::build(data, self.shape().to_vec(), false, Vec::new(), None)
    }

    /// Reverse pass from a single-element tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&parent.0.id) {
                            Some(acc) => add_into(acc, &pg),
                            None => {
                                grads.insert(parent.0.id, pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => add_into(acc, &g),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the differentiable subgraph; each node appears once.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, next)) = stack.pop() {
            if next < node.0.parents.len() {
                let parent = node.0.parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) || numel(shape) != len {
        return Err(Error::InvalidShape { shape: shape.to_vec(), len });
    }
    Ok(())
}

fn grad_disabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() > 0)
}

/// Runs `f` without recording any gradient graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
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

/// Values captured by [`Tensor::stop_gradient`] during a recording.
pub enum Freeze {
    Recording(Vec<Vec<f64>>),
    Replaying { values: Vec<Vec<f64>>, cursor: usize },
}

/// Evaluates `f` and returns every value that passed through `stop_gradient`.
pub fn record_frozen<T>(f: impl FnOnce() -> T) -> (T, Vec<Vec<f64>>) {
    let previous = FREEZE.with(|s| s.borrow_mut().replace(Freeze::Recording(Vec::new())));
    let out = f();
    let captured = FREEZE.with(|s| std::mem::replace(&mut *s.borrow_mut(), previous));
    match captured {
        Some(Freeze::Recording(values)) => (out, values),
        _ => (out, Vec::new()),
    }
}

/// Evaluates `f` with `stop_gradient` returning `values` in call order.
pub fn replay_frozen<T>(values: &[Vec<f64>], f: impl FnOnce() -> T) -> T {
    let state = Freeze::Replaying { values: values.to_vec(), cursor: 0 };
    let previous = FREEZE.with(|s| s.borrow_mut().replace(state));
    let out = f();
    FREEZE.with(|s| *s.borrow_mut() = previous);
    out
}

#[cfg(test)]
mod tests;

//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations on
//! tensors that require gradients record their inputs and a backward rule;
//! calling [`Tensor::backward`] on a scalar walks the recorded graph in
//! reverse topological order and accumulates gradients into every leaf that
//! was created with `requires_grad`.
//!
//! The element type is generic over [`Float`] so that the same graph can be
//! evaluated in `f32` for training and in `f64` when checking gradients
//! against finite differences.

mod conv;
mod element;
mod grad_check;
mod linalg;
mod loss;
mod norm;
mod ops;
mod rng;

use std::collections::{HashMap, HashSet};
use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use element::Float;
pub use grad_check::{grad_check, grad_check_sampled};
pub use rng::{RngState, SeededRng};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule for one recorded operation.
///
/// `parents` are the op inputs in call order, `out` the forward result and
/// `grad` the gradient flowing into the result. Returns one entry per parent;
/// `None` for parents that do not require gradients.
pub(crate) trait Backward<T: Float>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, parents: &[Tensor<T>], out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct GradFn<T: Float> {
    parents: Vec<Tensor<T>>,
    op: Box<dyn Backward<T>>,
}

struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
    grad: Mutex<Option<Vec<T>>>,
}

#[derive(Clone)]
pub struct Tensor<T: Float = f32>(Arc<Node<T>>);

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.grad_fn.as_ref().map(|g| g.op.name());
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &op)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize, op: &'static str) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::dim(op, format!("zero-sized dimension in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::dim(
            op,
            format!("shape {shape:?} holds {n} elements but data has {len}"),
        ));
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    fn make(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn,
            grad: Mutex::new(None),
        }))
    }

    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len(), "tensor")?;
        Ok(Self::make(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Leaf tensor that collects gradients.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len(), "tensor")?;
        Ok(Self::make(shape.to_vec(), Arc::new(data), true, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::make(shape.to_vec(), Arc::new(vec![value; n]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Result of an operation; records the graph only when needed.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        op: impl Backward<T> + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            parents,
            op: Box::new(op),
        });
        Self::make(shape, Arc::new(data), requires_grad, grad_fn)
    }

    /// Same data under a new shape; shares the buffer.
    pub(crate) fn from_shared(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        parents: Vec<Tensor<T>>,
        op: impl Backward<T> + 'static,
    ) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            parents,
            op: Box::new(op),
        });
        Self::make(shape, data, requires_grad, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on a tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Leaf copy with no history.
    pub fn detach(&self) -> Self {
        Self::make(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Leaf sharing the same data but collecting gradients.
    pub fn to_param(&self) -> Self {
        Self::make(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self
            .0
            .data
            .iter()
            .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
            .collect();
        Tensor::make(self.0.shape.clone(), Arc::new(data), false, None)
    }

    /// Reverse-mode pass from a single-element tensor.
    ///
    /// Gradients accumulate into the `grad` buffer of every leaf reached
    /// that requires gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // post-order DFS; reversed it is a valid topological order
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
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

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let pgrads = gf.op.backward(&gf.parents, &node.0.data, &g);
                    debug_assert_eq!(pgrads.len(), gf.parents.len(), "{}", gf.op.name());
                    for (p, pg) in gf.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{}", gf.op.name());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f32>::new(vec![], &[0]).is_err());
        let t = Tensor::<f32>::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.square();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subgraph_accumulates() {
        // f = sum(x*x + x) => df/dx = 2x + 1
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, -3.0, 2.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = {
            let _g = no_grad();
            x.square().sum_all()
        };
        assert!(!y.requires_grad());
        assert!(x.square().requires_grad());
    }
}

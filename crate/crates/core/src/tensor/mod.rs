//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations in
//! [`ops`] build new nodes and, when any input requires a gradient, record a
//! [`Backward`] implementation together with their parents. Calling
//! [`Tensor::backward`] on a scalar walks that graph in reverse topological
//! order and accumulates gradients into every leaf that requires one.
//!
//! The engine is generic over [`Float`]; detector models run in `f32` and
//! gradient checks run the same code in `f64`.

mod float;
pub mod gradcheck;
pub mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

pub use float::Float;
pub use gradcheck::grad_check;

use crate::error::{Error, Result};

/// Gradient rule of a recorded operation.
pub trait Backward<T: Float>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one entry per parent: `None` when the parent does not need a
    /// gradient, otherwise a buffer with the parent's length.
    fn backward(&self, parents: &[Tensor<T>], output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>>;
}

struct GradFn<T: Float> {
    parents: Vec<Tensor<T>>,
    op: Box<dyn Backward<T>>,
}

struct Node<T: Float> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Float = f32>(Arc<Node<T>>);

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<T> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op.name()))
            .field("data[..8]", &head)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("shape {shape:?} has a zero dimension")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {} elements but data has {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn: None,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel_of(shape)], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Trainable leaf: gradients accumulate into it on `backward`.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Self::new(shape, data)?.requires_grad())
    }

    /// A new leaf sharing this tensor's values and requiring a gradient.
    pub fn requires_grad(self) -> Self {
        let data = match Arc::try_unwrap(self.0) {
            Ok(node) => return Self::leaf(node.shape, node.data, true),
            Err(shared) => (shared.shape.clone(), shared.data.clone()),
        };
        Self::leaf(data.0, data.1, true)
    }

    /// A leaf copy with no history and no gradient requirement.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Builds the result of an operation. The op and parents are kept only
    /// if some parent requires a gradient.
    pub fn from_op(shape: Vec<usize>, data: Vec<T>, parents: Vec<Tensor<T>>, op: Box<dyn Backward<T>>) -> Self {
        debug_assert_eq!(
            numel_of(&shape),
            data.len(),
            "{} produced a mis-sized buffer",
            op.name()
        );
        let requires_grad = parents.iter().any(Tensor::requires_grad_flag);
        let grad_fn = requires_grad.then_some(GradFn { parents, op });
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
        }))
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

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Dims of a rank-4 tensor as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::invalid(format!(
                "expected a rank-4 [N,C,H,W] tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::leaf(
            self.0.shape.clone(),
            self.0.data.iter().map(|v| U::of(v.to_f64c())).collect(),
            self.0.requires_grad,
        )
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode accumulation from this scalar into every reachable leaf
    /// that requires a gradient. Leaf gradients add to existing buffers.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad_flag() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.key(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(grad_out) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad_out).for_each(|(a, g)| *a += *g),
                        None => *slot = Some(grad_out),
                    }
                }
                Some(gf) => {
                    let parent_grads = gf.op.backward(&gf.parents, &node.0.data, &grad_out)?;
                    if parent_grads.len() != gf.parents.len() {
                        return Err(Error::Internal(format!(
                            "{} returned {} gradients for {} parents",
                            gf.op.name(),
                            parent_grads.len(),
                            gf.parents.len()
                        )));
                    }
                    for (parent, g) in gf.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad_flag() {
                            continue;
                        }
                        if g.len() != parent.numel() {
                            return Err(Error::Internal(format!(
                                "{} gradient has {} elements, parent has {}",
                                gf.op.name(),
                                g.len(),
                                parent.numel()
                            )));
                        }
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v),
                            None => {
                                grads.insert(parent.key(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require a gradient.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad_flag() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a shape, a row-major value buffer, and
//! an optional gradient buffer. Differentiable operations live on
//! [`GradGraph`], which records every executed op; a backward sweep replays
//! the record in reverse and accumulates adjoints into every tensor that
//! requires a gradient.
//!
//! Training runs in `f32`; gradient verification instantiates the same code
//! in `f64` (see the element type parameter).

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

mod graph;
pub use graph::GradGraph;

/// Scalar element type for tensors: `f32` for training, `f64` for
/// finite-difference verification.
pub trait Element: num_traits::Float + fmt::Debug + fmt::Display + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Gauss error function, used by the exact GELU.
    fn erf(self) -> Self;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

struct Inner<E: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    /// Set when this tensor is the output of a recorded op: (graph id, node index).
    node: Cell<Option<(u64, usize)>>,
}

/// Shared handle to an n-dimensional array of `E`.
///
/// Scalars use the empty shape `[]`. Cloning is cheap (reference count).
#[derive(Clone)]
pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(data: Vec<E>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!("data length {} != product of shape {:?}", data.len(), shape),
            ));
        }
        Ok(Self::from_raw(data, shape.to_vec(), requires_grad))
    }

    pub(crate) fn from_raw(data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        }
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_raw(vec![E::zero(); numel], shape.to_vec(), requires_grad)
    }

    pub fn full(shape: &[usize], value: E, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_raw(vec![value; numel], shape.to_vec(), requires_grad)
    }

    pub fn scalar(value: E) -> Self {
        Self::from_raw(vec![value], Vec::new(), false)
    }

    /// 2-D constructor; `data` is row-major.
    pub fn matrix(rows: usize, cols: usize, data: Vec<E>, requires_grad: bool) -> Result<Self> {
        Self::new(data, &[rows, cols], requires_grad)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.inner.shape.len(), 2);
        self.inner.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.inner.shape.len(), 2);
        self.inner.shape[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the value buffer (used by optimizers). Must not be
    /// called while a forward/backward pass that references this tensor is
    /// in flight.
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    /// Copy of the gradient buffer, if one has been populated.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn set_node(&self, graph_id: u64, index: usize) {
        self.inner.node.set(Some((graph_id, index)));
    }

    pub(crate) fn node_in(&self, graph_id: u64) -> Option<usize> {
        match self.inner.node.get() {
            Some((gid, idx)) if gid == graph_id => Some(idx),
            _ => None,
        }
    }

    /// Identity comparison: do both handles refer to the same allocation?
    pub fn same_tensor(&self, other: &Tensor<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Lossless conversion helper for mixed-precision tests and checkpoints.
    pub fn map_elements<F: Element>(&self, f: impl Fn(E) -> F) -> Tensor<F> {
        let data = self.inner.data.borrow().iter().map(|&v| f(v)).collect();
        Tensor::from_raw(data, self.inner.shape.clone(), self.inner.requires_grad)
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![1.0f32, 2.0], &[3], false).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(4.0f32);
        assert!(s.shape().is_empty());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.0);
    }

    #[test]
    fn grad_accumulates_and_resets() {
        let t = Tensor::new(vec![1.0f64, 2.0], &[2], true).unwrap();
        t.accumulate_grad(&[0.5, 0.5]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}

//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after construction. Operations that participate in
//! differentiation record their parents and a backward closure; calling
//! [`Tensor::backward`] on a scalar loss walks the recorded graph in reverse
//! topological order and accumulates gradients into every reachable tensor
//! with `requires_grad` set. Gradients accumulate across repeated backward
//! calls until [`Tensor::clear_grad`] is invoked.
//!
//! The element type is generic over [`Element`]: training and inference run
//! in `f32`, gradient-checking tests instantiate the same code with `f64`.
//!
//! The graph lives on one thread (`Rc`-linked); parallel workloads build an
//! independent graph per worker from shared read-only parameter data.

mod adam;
mod autograd;
mod ops;

pub use adam::{adam_step, AdamConfig, AdamState};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

/// Scalar types the engine runs on.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Element for f32 {}
impl Element for f64 {}

/// Shorthand for lifting an `f64` constant into the element type.
pub(crate) fn c<T: Element>(x: f64) -> T {
    T::from_f64(x).expect("constant representable in element type")
}

static CHECKED: AtomicBool = AtomicBool::new(false);

/// Enable or disable checked mode: every operation result is scanned for
/// NaN/Inf and surfaces [`Error::NonFinite`]. Off by default; tests turn it
/// on.
pub fn set_checked_mode(on: bool) {
    CHECKED.store(on, Ordering::Relaxed);
}

pub fn checked_mode() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

type BackwardFn<T> = Box<dyn Fn(&Inner<T>)>;

pub(crate) struct Inner<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward_fn: Option<BackwardFn<T>>,
}

/// A dense n-dimensional array of floats, cheap to clone (shared storage).
pub struct Tensor<T: Element = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish_non_exhaustive()
    }
}

impl<T: Element> Tensor<T> {
    /// A constant tensor (does not participate in differentiation).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// A trainable leaf: gradients will be accumulated into it by backward.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidInput {
                op: "tensor",
                msg: format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward_fn: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![T::zero(); numel], shape, false).expect("consistent by construction")
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], &[1], false).expect("consistent by construction")
    }

    /// Result of an operation. Scans for non-finite values in checked mode.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward_fn: Option<BackwardFn<T>>,
    ) -> Result<Self> {
        if checked_mode() && !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = backward_fn.is_some();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents: if requires_grad { parents } else { Vec::new() },
                backward_fn,
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// The value of a one-element tensor.
    ///
    /// Panics if the tensor has more than one element; this is a programmer
    /// error, not a data error.
    pub fn item(&self) -> T {
        assert!(
            self.numel() == 1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Drop accumulated gradients (next backward starts from zero).
    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[T]) {
        debug_assert_eq!(contribution.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(grad) => {
                for (g, &c) in grad.iter_mut().zip(contribution) {
                    *g += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    pub(crate) fn inner(&self) -> &Inner<T> {
        &self.inner
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

impl<T: Element> Inner<T> {
    pub(crate) fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub(crate) fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn parents(&self) -> &[Tensor<T>] {
        &self.parents
    }

    /// Gradient of this node during the backward pass. Zero if the node was
    /// never reached (cannot happen for nodes in the traversal order).
    pub(crate) fn grad_or_zeros(&self) -> Vec<T> {
        self.grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![T::zero(); self.data.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_must_match_data() {
        let err = Tensor::new(vec![1.0f32, 2.0], &[3]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput { op: "tensor", .. }));
    }

    #[test]
    fn item_reads_scalar() {
        assert_eq!(Tensor::scalar(4.0f32).item(), 4.0);
    }

    #[test]
    #[should_panic(expected = "item()")]
    fn item_rejects_non_scalar() {
        Tensor::new(vec![1.0f32, 2.0], &[2]).unwrap().item();
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        set_checked_mode(true);
        let r = Tensor::<f32>::from_op("test", vec![f32::NAN], vec![1], vec![], None);
        set_checked_mode(false);
        assert!(matches!(r, Err(Error::NonFinite { op: "test" })));
    }
}

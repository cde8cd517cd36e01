//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Design notes:
//! - Storage is a flat `Vec<T>` in row-major order; shape ops copy rather
//!   than stride. Copies are cheap at the scales this crate targets and keep
//!   every backward rule trivially correct.
//! - `Tensor` is a cheap handle (`Rc`). The computation graph is embedded in
//!   the tensors themselves: each op output records its parents and a
//!   vector-Jacobian product closure. `backward` replays that record in
//!   reverse topological order exactly once and clears it.
//! - Gradients accumulate into per-tensor buffers and are never cleared by
//!   `backward`, so two backward passes over fresh graphs add up.
//! - Broadcasting is restricted to scalar-vs-tensor and equal shapes;
//!   anything richer is a dedicated named op with its own backward rule.
//! - The graph lives on one thread. Parallelism happens inside the heavy
//!   kernels (matmul, conv) via rayon, with fixed reduction order so results
//!   are bitwise reproducible.

mod attention;
mod conv;
mod norm;
mod ops;

pub use attention::softmax_attention;
pub use norm::{group_norm, layer_norm};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar element type for tensors: `f32` for training, `f64` for oracles.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn tanh(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline]
            fn minimum(self, other: Self) -> Self {
                self.min(other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Shorthand for casting schedule constants and hyperparameters into `T`.
#[inline]
pub(crate) fn cast<T: Element>(v: f64) -> T {
    T::from_f64(v)
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with gradient recording disabled (restored on exit, even on panic).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let _g = Guard(NO_GRAD.with(|c| c.replace(true)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

/// Vector-Jacobian product: given the gradient w.r.t. the op output and a
/// per-parent "is gradient needed" mask, produce gradients for each parent.
type Vjp<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Element> {
    parents: Vec<Tensor<T>>,
    vjp: Vjp<T>,
}

struct Inner<T: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<T>>>,
    node: RefCell<Option<Node<T>>>,
}

/// Dense row-major tensor handle; clones share storage.
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
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn new_leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                node: RefCell::new(None),
            }),
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(invalid(
                "from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self::new_leaf(data, shape.to_vec(), false))
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_leaf((0..numel).map(&mut f).collect(), shape.to_vec(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_leaf(vec![T::ZERO; numel], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_leaf(vec![cast(v); numel], shape.to_vec(), false)
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(&[1], v)
    }

    /// Standard-normal samples; draws in `f64` and casts, so the stream of
    /// consumed random numbers is identical for `f32` and `f64` tensors.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                cast(v)
            })
            .collect();
        Self::new_leaf(data, shape.to_vec(), false)
    }

    /// Normal samples with the given standard deviation (parameter init).
    pub fn randn_std(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                cast(v * std)
            })
            .collect();
        Self::new_leaf(data, shape.to_vec(), false)
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(data: Vec<T>, shape: &[usize]) -> TensorResult<Self> {
        let t = Self::from_vec(data, shape)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    /// Construct an op output, recording the graph edge when tracking is on.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        vjp: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = if track {
            Some(Node {
                parents,
                vjp: Box::new(vjp),
            })
        } else {
            None
        };
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(track),
                grad: RefCell::new(None),
                node: RefCell::new(node),
            }),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.shape.clone()
    }

    pub fn dims(&self) -> &[usize] {
        // Shape is immutable after construction, so handing out a slice tied
        // to the Rc allocation is safe for the handle's lifetime.
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw storage. Reserved for optimizers and
    /// checkpoint loading; never call while a forward graph referencing this
    /// tensor is still live on another borrow.
    pub fn data_mut(&self) -> std::cell::RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| v.to_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.set(v);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Copy of the data with no graph history.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_leaf(self.to_vec(), self.inner.shape.clone(), false)
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn ptr_id(&self) -> *const () {
        Rc::as_ptr(&self.inner) as *const ()
    }

    /// Reverse-mode differentiation from a scalar loss.
    ///
    /// Populates `grad` on every tensor that participated with
    /// `requires_grad`, visiting each recorded op exactly once and clearing
    /// the record as it goes.
    pub fn backward(&self) -> TensorResult<()> {
        if self.numel() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.inner.shape),
            ));
        }

        // Iterative post-order DFS over parent edges.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<*const ()> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr_id());
        while let Some((t, child_idx)) = stack.pop() {
            let next = {
                let node = t.inner.node.borrow();
                node.as_ref().and_then(|n| n.parents.get(child_idx).cloned())
            };
            match next {
                Some(p) => {
                    stack.push((t, child_idx + 1));
                    if visited.insert(p.ptr_id()) {
                        stack.push((p, 0));
                    }
                }
                None => order.push(t),
            }
        }

        self.accumulate_grad(&[T::ONE]);

        for t in order.iter().rev() {
            let node = t.inner.node.borrow_mut().take();
            let Some(node) = node else { continue };
            let gout = match t.inner.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue, // no consumer contributed gradient
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
            let pgrads = (node.vjp)(&gout, &needs);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(pgrads) {
                if let Some(g) = g {
                    if p.requires_grad() {
                        debug_assert_eq!(g.len(), p.numel());
                        p.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Broadcast classification for binary elementwise ops.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Broadcast {
    Equal,
    ScalarLhs,
    ScalarRhs,
}

pub(crate) fn broadcast_kind<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> TensorResult<Broadcast> {
    if a.dims() == b.dims() {
        Ok(Broadcast::Equal)
    } else if a.numel() == 1 {
        Ok(Broadcast::ScalarLhs)
    } else if b.numel() == 1 {
        Ok(Broadcast::ScalarRhs)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.add(&x).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        // d loss / d loss = 1
        assert_eq!(loss.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn grad_accumulates_across_backward_passes() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        for _ in 0..2 {
            let loss = x.mul(&x).unwrap().sum_all();
            loss.backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn tape_cleared_after_backward() {
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert!(y.inner.node.borrow().is_none());
        // a second backward on the cleared graph leaves x.grad unchanged
        let gx = x.grad().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), gx);
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
        assert!(y.inner.node.borrow().is_none());
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // loss = (x*x) + (x*x) reusing the same intermediate: grad = 4x
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let sq = x.mul(&x).unwrap();
        let loss = sq.add(&sq).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }
}

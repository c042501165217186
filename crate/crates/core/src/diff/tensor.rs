//! Dense row-major tensors that record a reverse-mode differentiation graph.
//!
//! Every op produces a new immutable node. Leaves created with
//! [`Tensor::param`] accumulate gradients; interior nodes hold a backward
//! closure that maps the output gradient onto each parent.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Maps `(grad_out, out_value, parents, needs_grad)` to one optional gradient per parent.
pub type BackwardFn<T> =
    Box<dyn Fn(&[T], &[T], &[Tensor<T>], &[bool]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Scalar> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: RefCell<Option<GradFn<T>>>,
    consumed: Cell<bool>,
}

pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any differentiation graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn make(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn: RefCell::new(grad_fn),
            consumed: Cell::new(false),
        }))
    }

    /// A constant tensor that never receives a gradient.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// A trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "param",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::make(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::make(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::make(Vec::new(), vec![v], false, None)
    }

    /// Builds the output of a custom differentiable op. The backward closure is
    /// only retained when some parent requires a gradient and recording is on.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires {
            Self::make(shape, data, true, Some(GradFn { parents, backward }))
        } else {
            Self::make(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.borrow().is_none() && !self.0.consumed.get()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn take_grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow_mut().take()
    }

    /// Overwrites the values of a leaf in place.
    pub fn set_data(&self, values: &[T]) -> Result<()> {
        if self.0.grad_fn.borrow().is_some() {
            return Err(Error::InvalidArgument("set_data on a non-leaf tensor".into()));
        }
        let mut d = self.0.data.borrow_mut();
        if d.len() != values.len() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                lhs: self.0.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        d.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::make(self.0.shape.clone(), self.to_vec(), false, None)
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable leaf created with [`Tensor::param`]. The graph is released as
    /// it is traversed, so a second call on the same loss fails.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.0.shape.clone()));
        }
        if self.0.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.key(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            let grad_fn = node.0.grad_fn.borrow_mut().take();
            match grad_fn {
                None => {
                    if node.0.consumed.get() {
                        return Err(Error::GraphConsumed);
                    }
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => *slot = Some(g),
                    }
                }
                Some(GradFn { parents, backward }) => {
                    node.0.consumed.set(true);
                    let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
                    let pgrads = {
                        let out = node.0.data.borrow();
                        backward(&g, &out, &parents, &needs)
                    };
                    for ((p, pg), need) in parents.iter().zip(pgrads).zip(&needs) {
                        let (Some(pg), true) = (pg, *need) else { continue };
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        self.0.consumed.set(true);
        Ok(())
    }

    /// Post-order over nodes that require a gradient.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = t.0.grad_fn.borrow().as_ref() {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Tensors produced by an
//! operation whose inputs require gradients carry a backward record ([`Op`])
//! pointing at their parents, so the forward pass builds an acyclic graph as
//! a side effect. [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates gradients into leaf tensors.
//!
//! Graphs are single-threaded (`Rc`); independent graphs may be built on
//! separate threads.

mod check;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub(crate) use ops::Op;
pub use check::gradcheck;
pub use ops::top_k_indices;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording backward graphs on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.0.op.as_ref().map(Op::name))
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    fn from_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            op,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        Ok(Self::from_node(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_node(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_node(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_node(Vec::new(), vec![value], false, None)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parameter("ragged rows".into()));
        }
        Self::new(rows.concat(), &[m, n])
    }

    /// Result of an operation: records `op` only if a parent needs gradients.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        let track = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if track {
            Self::from_node(shape, data, true, Some(op))
        } else {
            Self::from_node(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Parameter(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable view of the values. Only meaningful on leaves; mutating an
    /// interior node does not invalidate gradients already computed from it.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    pub fn item(&self) -> f64 {
        self.data()[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data()[i * self.0.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        let n = *self.0.shape.last().unwrap_or(&1);
        self.data()[i * n..(i + 1) * n].to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Toggles gradient tracking on a leaf. Interior nodes are left alone.
    pub fn set_requires_grad(&self, on: bool) {
        if self.0.op.is_none() {
            self.0.requires_grad.set(on);
            if !on {
                self.zero_grad();
            }
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Sets the gradient to an explicit zero buffer, so a leaf that ends up
    /// outside the next graph still reports a (zero) gradient.
    pub fn reset_grad(&self) {
        *self.0.grad.borrow_mut() = Some(vec![0.0; self.numel()]);
    }

    /// Detached copy of the values as a fresh constant.
    pub fn detach(&self) -> Tensor {
        Self::from_node(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Deep copy as a new leaf with the same `requires_grad` flag.
    pub fn deep_clone(&self) -> Tensor {
        Self::from_node(self.0.shape.clone(), self.to_vec(), self.requires_grad(), None)
    }

    pub fn same_handle(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Reverse pass from a scalar. Gradients accumulate into leaves, so a
    /// second call without [`Tensor::zero_grad`] doubles them. The graph is
    /// left intact and may be traversed again.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Rank(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let out = node.data();
                    for (parent, pg) in op.backward(&out, node.shape(), &g) {
                        if !parent.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that take part in the gradient computation.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

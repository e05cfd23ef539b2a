//! Reverse-mode automatic differentiation over dynamically shaped `f64` arrays.
//!
//! Every differentiable operation produces a graph node holding the forward
//! value plus a closure that maps the upstream gradient to per-parent
//! gradients. `Tensor::backward` runs one topological sweep and accumulates
//! gradients into each node. Graphs are per-thread and freed when the loss
//! tensor is dropped; recording can be switched off with [`no_grad`] for
//! inference passes.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{ArrayD, IxDyn};

pub mod conv;
pub mod ops;

/// Raw array type used throughout the crate.
pub type Data = ArrayD<f64>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

/// Whether operations on this thread currently record the graph.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&Data) -> Vec<Option<Data>>>;

struct Node {
    id: usize,
    value: RefCell<Data>,
    grad: RefCell<Option<Data>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A node in the autodiff graph. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn make(value: Data, grad: bool, parents: Vec<Tensor>, backward: Option<BackwardFn>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents,
                backward,
                requires_grad: grad,
            }),
        }
    }

    /// Leaf tensor; `requires_grad` marks it as a trainable parameter.
    pub fn new(value: Data, requires_grad: bool) -> Tensor {
        Tensor::make(value, requires_grad, vec![], None)
    }

    /// Leaf tensor that never tracks gradients.
    pub fn constant(value: Data) -> Tensor {
        Tensor::make(value, false, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    /// Interior node produced by a differentiable operation.
    ///
    /// `backward` receives the upstream gradient (same shape as `value`) and
    /// returns one optional gradient per parent, in order. When recording is
    /// off or no parent needs gradients the node degenerates to a constant.
    pub fn from_op(
        value: Data,
        parents: Vec<Tensor>,
        backward: impl Fn(&Data) -> Vec<Option<Data>> + 'static,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Tensor::constant(value);
        }
        Tensor::make(value, true, parents, Some(Box::new(backward)))
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'_, Data> {
        self.node.value.borrow()
    }

    /// Owned copy of the forward value.
    pub fn to_data(&self) -> Data {
        self.node.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.node.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.len(), 1, "item() on tensor with {} elements", v.len());
        *v.iter().next().expect("empty tensor")
    }

    /// Accumulated gradient, if any (cloned).
    pub fn grad(&self) -> Option<Data> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Mutates the stored value in place (parameter updates, perturbations).
    pub fn update_value(&self, f: impl FnOnce(&mut Data)) {
        f(&mut self.node.value.borrow_mut());
    }

    /// Same value, cut out of the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_data())
    }

    /// Backpropagates from this scalar; gradients accumulate into every
    /// reachable node's `grad` slot.
    pub fn backward(&self) {
        assert_eq!(
            self.len(),
            1,
            "backward() requires a scalar loss, got shape {:?}",
            self.shape()
        );
        let order = self.topo_order();
        {
            let mut g = self.node.grad.borrow_mut();
            let seed = ArrayD::ones(self.value().raw_dim());
            *g = Some(match g.take() {
                Some(existing) => existing + seed,
                None => seed,
            });
        }
        for t in order.iter().rev() {
            let Some(backward) = t.node.backward.as_ref() else {
                continue;
            };
            let upstream = match t.node.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue, // branch not reached by the loss
            };
            let parent_grads = backward(&upstream);
            debug_assert_eq!(parent_grads.len(), t.node.parents.len());
            for (parent, pg) in t.node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.node.requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    parent.value().shape(),
                    "gradient shape mismatch for node {}",
                    parent.node.id
                );
                let mut slot = parent.node.grad.borrow_mut();
                *slot = Some(match slot.take() {
                    Some(acc) => acc + pg,
                    None => pg,
                });
            }
            // Interior gradients are not needed once consumed.
            if t.node.id != self.node.id && !t.node.parents.is_empty() {
                *t.node.grad.borrow_mut() = None;
            }
        }
    }

    /// Iterative post-order over the graph rooted at `self`.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        // (tensor, children_pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                if p.node.requires_grad && !visited.contains(&p.node.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub fn reduce_to_shape(grad: &Data, shape: &[usize]) -> Data {
    let mut out = grad.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(ndarray::Axis(0));
    }
    for ax in 0..shape.len() {
        if out.shape()[ax] != shape[ax] {
            debug_assert_eq!(shape[ax], 1, "non-broadcast shape mismatch");
            out = out
                .sum_axis(ndarray::Axis(ax))
                .insert_axis(ndarray::Axis(ax));
        }
    }
    out
}

/// Broadcast target shape of two operands (numpy rules).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} are not broadcastable"
        );
        out[i] = da.max(db);
    }
    out
}

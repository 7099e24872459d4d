//! Dense N-d arrays participating in a reverse-mode differentiation tape.
//!
//! Every tensor is a node in an implicit DAG: leaves hold data (and a
//! gradient accumulator when `requires_grad`), interior nodes additionally
//! hold their parent links and a backward closure. Calling
//! [`Tensor::backward`] on a scalar loss records the reachable subgraph in
//! topological order onto a [`Tape`] and replays it in reverse, accumulating
//! gradients additively into every node that needs one.
//!
//! Data is row-major contiguous. Broadcasting is restricted to leading batch
//! dimensions: a lower-rank operand whose shape is a suffix of the other
//! operand's shape is tiled across the leading extents, nothing else. Every
//! op asserts its shape contract and panics on violation; every op also
//! panics if it produces a non-finite value.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::Real;

mod check;
mod io;
mod ops;

pub use check::{gradcheck, gradcheck_sampled, max_rel_err, rel_err, GradcheckReport};

/// Backward closure: maps the output gradient to one gradient per parent
/// (`None` for parents that do not need one).
pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<Vec<Real>>>>;

/// Context handed to a backward closure.
pub(crate) struct BackwardCtx<'a> {
    pub out_grad: &'a [Real],
    pub out_data: &'a [Real],
    pub parents: &'a [Tensor],
}

struct Node {
    op: &'static str,
    shape: Vec<usize>,
    data: RefCell<Vec<Real>>,
    requires_grad: bool,
    needs_grad: bool,
    grad: RefCell<Option<Vec<Real>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    mark: Cell<u64>,
}

/// Shared handle to a tape node. Cloning is cheap (reference count bump) and
/// aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

static MARK_EPOCH: AtomicU64 = AtomicU64::new(1);

fn assert_finite(op: &str, data: &[Real]) {
    for (i, v) in data.iter().enumerate() {
        assert!(
            v.is_finite(),
            "op `{op}` produced non-finite value {v} at flat index {i}"
        );
    }
}

impl Tensor {
    fn new_node(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<Real>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "op `{op}`: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert_finite(op, &data);
        let needs_grad = requires_grad || parents.iter().any(|p| p.node.needs_grad);
        Tensor {
            node: Rc::new(Node {
                op,
                shape,
                data: RefCell::new(data),
                requires_grad,
                needs_grad,
                grad: RefCell::new(None),
                parents,
                backward,
                mark: Cell::new(0),
            }),
        }
    }

    /// Leaf tensor holding `data` with the given shape.
    pub fn leaf(shape: &[usize], data: Vec<Real>, requires_grad: bool) -> Tensor {
        Tensor::new_node("leaf", shape.to_vec(), data, requires_grad, Vec::new(), None)
    }

    /// Interior node produced by a custom op.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<Real>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let needs = parents.iter().any(|p| p.node.needs_grad);
        let backward = if needs { Some(backward) } else { None };
        Tensor::new_node(op, shape, data, false, parents, backward)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape, vec![0.0; n], false)
    }

    pub fn full(shape: &[usize], value: Real) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape, vec![value; n], false)
    }

    pub fn scalar(value: Real) -> Tensor {
        Tensor::leaf(&[], vec![value], false)
    }

    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Tensor {
        Tensor::leaf(shape, data, false)
    }

    /// Marks this leaf as a trainable parameter.
    pub fn param(shape: &[usize], data: Vec<Real>) -> Tensor {
        Tensor::leaf(shape, data, true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<Real>> {
        self.node.data.borrow()
    }

    /// Mutable access to the raw storage. Intended for optimizer updates and
    /// buffer maintenance on leaves; mutating an interior node invalidates
    /// any tape built on top of it.
    pub fn data_mut(&self) -> RefMut<'_, Vec<Real>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<Real> {
        self.node.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<Real>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Replaces the accumulated gradient (used by gradient clipping).
    pub fn set_grad(&self, g: Vec<Real>) {
        assert_eq!(g.len(), self.numel(), "gradient length must match tensor");
        *self.node.grad.borrow_mut() = Some(g);
    }

    /// True when both handles alias the same node.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    fn accumulate_grad(&self, g: &[Real]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of every
    /// `requires_grad` leaf reachable from `self` are accumulated into their
    /// `grad` slots (additively across repeated `backward` calls).
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() requires a scalar loss, got shape {:?}",
            self.shape()
        );
        let tape = Tape::record(self);
        self.accumulate_grad(&[1.0]);
        for node in tape.order.iter().rev() {
            let Some(backward) = node.node.backward.as_ref() else {
                continue;
            };
            let out_grad = node
                .node
                .grad
                .borrow()
                .clone()
                .expect("tape order guarantees the gradient is present");
            let out_data = node.node.data.borrow();
            let ctx = BackwardCtx {
                out_grad: &out_grad,
                out_data: &out_data,
                parents: &node.node.parents,
            };
            let parent_grads = backward(&ctx);
            drop(out_data);
            assert_eq!(parent_grads.len(), node.node.parents.len());
            for (parent, pg) in node.node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.node.needs_grad {
                        assert_eq!(pg.len(), parent.numel(), "gradient shape mismatch in `{}`", node.node.op);
                        assert_finite(node.node.op, &pg);
                        parent.accumulate_grad(&pg);
                    }
                }
            }
            // Interior gradients are transient; only leaves keep theirs.
            if !node.node.requires_grad {
                *node.node.grad.borrow_mut() = None;
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.node.op)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

/// Ordered record of the ops reachable from a loss: parents precede
/// consumers, so the reversed order visits each node exactly once with its
/// full output gradient already accumulated.
pub struct Tape {
    order: Vec<Tensor>,
}

impl Tape {
    /// Depth-first postorder over parent links, restricted to nodes that
    /// need gradients. Deterministic: order depends only on graph structure.
    pub fn record(root: &Tensor) -> Tape {
        let epoch = MARK_EPOCH.fetch_add(1, Ordering::Relaxed);
        let mut order = Vec::new();
        // (node, next child index) explicit stack; recursion would overflow
        // on long op chains.
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        if root.node.needs_grad {
            root.node.mark.set(epoch);
            stack.push((root.clone(), 0));
        }
        while let Some((node, child)) = stack.last_mut() {
            let parents = &node.node.parents;
            let mut pushed = false;
            while *child < parents.len() {
                let p = &parents[*child];
                *child += 1;
                if p.node.needs_grad && p.node.mark.get() != epoch {
                    p.node.mark.set(epoch);
                    let p = p.clone();
                    stack.push((p, 0));
                    pushed = true;
                    break;
                }
            }
            if !pushed {
                let (done, _) = stack.pop().expect("stack is non-empty");
                order.push(done);
            }
        }
        Tape { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

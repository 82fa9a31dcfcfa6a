//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Graphs are built eagerly during the forward pass and torn down by
//! [`Tensor::backward`]; nothing is retained across passes. Gradients
//! accumulate additively, so a leaf used twice receives both contributions.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::BackOp;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with graph recording disabled; outputs inside are constants.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

pub(crate) struct Inner {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Option<BackOp>,
}

/// Shared handle to a tensor node. Cloning the handle aliases the node.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<Inner>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<BackOp>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: next_id(),
                shape,
                data,
                grad: None,
                requires_grad,
                op,
            })),
        }
    }

    /// Constant leaf (no gradient tracking).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec".into() });
        }
        Ok(Tensor::new(data, shape.to_vec(), false, None))
    }

    /// Leaf that participates in gradient computation.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![v], vec![1], false, None)
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, parents_require: bool, op: BackOp) -> Tensor {
        if parents_require && grad_enabled() {
            Tensor::new(data, shape, true, Some(op))
        } else {
            Tensor::new(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "item() on tensor of shape {:?}",
                inner.shape
            )));
        }
        Ok(inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrites the stored values. Shape must match; graph edges are not
    /// affected (only sensible on leaves between passes).
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.data.len() != data.len() {
            return Err(Error::LengthMismatch { what: "set_data".into() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "set_data".into() });
        }
        inner.data.copy_from_slice(data);
        Ok(())
    }

    /// Copy of the values as a fresh constant leaf, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::new(inner.data.clone(), inner.shape.clone(), false, None)
    }

    /// Reverse-mode sweep from a scalar root. Populates `grad` on every
    /// requires_grad leaf reachable from the root, then frees the graph.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "backward root must be scalar, got shape {:?}",
                    inner.shape
                )));
            }
            if inner.op.is_none() {
                return Err(Error::InvalidArgument(
                    "backward on a detached tensor (no recorded graph)".into(),
                ));
            }
        }

        let order = self.topo_order();

        self.inner.borrow_mut().grad = Some(vec![1.0]);

        for node in order.iter().rev() {
            let (out_data, out_grad, op) = {
                let mut inner = node.inner.borrow_mut();
                let Some(grad) = inner.grad.clone() else { continue };
                let Some(op) = inner.op.take() else { continue };
                (inner.data.clone(), grad, op)
            };
            let contributions = op.apply(&node.inner.borrow().shape, &out_data, &out_grad)?;
            for (parent, contrib) in contributions {
                let mut p = parent.inner.borrow_mut();
                if !p.requires_grad {
                    continue;
                }
                if contrib.len() != p.data.len() {
                    return Err(Error::LengthMismatch {
                        what: "gradient accumulation".into(),
                    });
                }
                match &mut p.grad {
                    Some(g) => {
                        for (gi, ci) in g.iter_mut().zip(&contrib) {
                            *gi += ci;
                        }
                    }
                    None => p.grad = Some(contrib),
                }
            }
        }

        // Interior nodes (anything that had an op) drop their scratch grads;
        // leaves keep theirs for the optimizer or the caller.
        for node in order {
            let mut inner = node.inner.borrow_mut();
            if inner.op.is_some() {
                inner.op = None;
            }
        }
        Ok(())
    }

    /// Post-order DFS over parent edges; reversed it is a topological order
    /// with the root first.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: std::collections::HashSet<u64> = std::collections::HashSet::new();
        // (node, next-parent-index) emulates recursion.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((node, idx)) = stack.pop() {
            let parent = {
                let inner = node.inner.borrow();
                inner.op.as_ref().and_then(|op| op.parent(idx))
            };
            match parent {
                Some(p) => {
                    stack.push((node, idx + 1));
                    if seen.insert(p.id()) {
                        stack.push((p, 0));
                    }
                }
                None => order.push(node),
            }
        }
        // Interior nodes need grad buffers even when they are not leaves.
        for node in &order {
            let mut inner = node.inner.borrow_mut();
            if inner.op.is_some() {
                inner.grad = None;
            }
        }
        order
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(f, "Tensor(shape={:?}, requires_grad={})", inner.shape, inner.requires_grad)
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast result shape under right-aligned numpy rules.
pub(crate) fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        };
    }
    Ok(out)
}

/// Per-dimension strides into `shape` as seen from `out_shape`; broadcast
/// dimensions get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let own = strides_of(shape);
    let mut s = vec![0usize; nd];
    for i in 0..nd {
        if i >= nd - shape.len() {
            let j = i - (nd - shape.len());
            s[i] = if shape[j] == 1 { 0 } else { own[j] };
        }
    }
    s
}

/// Applies `f(a_i, b_i)` elementwise over the broadcast of the two inputs.
pub(crate) fn zip_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let n = numel(out_shape);
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f(a[oa], b[ob]));
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Folds a gradient over `out_shape` back down to `shape` by summing over
/// the broadcast dimensions.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return grad.to_vec();
    }
    let n = numel(out_shape);
    let s = broadcast_strides(shape, out_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let mut out = vec![0.0; numel(shape)];
    for g in grad.iter().take(n) {
        out[off] += g;
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += s[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= s[d] * out_shape[d];
        }
    }
    out
}

pub(crate) fn ensure_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: op.to_string() });
    }
    Ok(())
}

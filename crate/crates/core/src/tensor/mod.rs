//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a node in a dynamically built
//! computation DAG. Operations record their inputs; [`Tensor::backward`]
//! walks the graph once in reverse topological order and accumulates exact
//! partial derivatives into every leaf that has `requires_grad` set.
//!
//! Design points that the rest of the crate relies on:
//!
//! * Node ids increase monotonically at construction time, so descending id
//!   order is a valid reverse-topological order — no explicit sort pass
//!   beyond ordering by id.
//! * Gradient accumulation is additive. Calling `backward` twice (or on two
//!   losses sharing leaves) sums contributions, which is what gradient
//!   accumulation over micro-batches needs. Callers clear grads explicitly.
//! * Intermediate gradients live in a transient map during the pass; only
//!   leaves retain `.grad`, so repeated backward passes through shared
//!   subexpressions never double-count.
//! * Everything is single-threaded and the reduction order inside kernels is
//!   fixed, so whole-pipeline runs are bit-reproducible.

mod gradcheck;
mod index;
mod kernels;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use index::IndexMap;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Element types the tensor core supports: `f32` for production runs and
/// `f64` for gradient checking.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + fmt::Debug
    + fmt::Display
    + Default
    + Copy
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// RAII guard disabling graph construction on the current thread.
///
/// While alive, newly created operation results are plain leaves with no
/// parents, so inference runs allocate no tape and free activations eagerly.
pub struct NoGradGuard(());

impl NoGradGuard {
    fn new() -> Self {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
        NoGradGuard(())
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Disables gradient tracking until the returned guard is dropped.
pub fn no_grad() -> NoGradGuard {
    NoGradGuard::new()
}

fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get()) == 0
}

/// The operation that produced a node, holding handles to its inputs.
enum Op<E: Scalar> {
    Leaf,
    Add(Tensor<E>, Tensor<E>),
    Sub(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Neg(Tensor<E>),
    Scale(Tensor<E>, E),
    /// `(m,k) @ (k,n)`
    MatMul(Tensor<E>, Tensor<E>),
    /// `(m,k) @ (n,k)ᵀ` — the natural layout for `x @ Wᵀ` projections.
    MatMulNt(Tensor<E>, Tensor<E>),
    Gelu(Tensor<E>),
    /// Softmax over the last axis.
    SoftmaxRows(Tensor<E>),
    /// Layer normalization over the last axis with learned scale and shift.
    LayerNorm {
        x: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        eps: f64,
    },
    Reshape(Tensor<E>),
    /// `out[i] = x[idx.map[i]]` — one op covering slicing, permutation,
    /// broadcasting, embedding lookup, patchification and their inverses.
    Gather(Tensor<E>, Rc<IndexMap>),
    /// Concatenation along axis 0 of same-trailing-shape tensors.
    ConcatRows(Vec<Tensor<E>>),
    MeanAll(Tensor<E>),
    SumAll(Tensor<E>),
}

struct Node<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    op: Op<E>,
}

/// A handle onto a tensor node. Clones share the node.
pub struct Tensor<E: Scalar> {
    node: Rc<Node<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "tensor shapes must be non-empty lists of positive dims, got {shape:?}"
        )));
    }
    Ok(())
}

impl<E: Scalar> Tensor<E> {
    fn make(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Op<E>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Result of an op: participates in the graph only when gradients are
    /// enabled and at least one input participates; otherwise it degrades to
    /// a leaf so the input subgraph can be freed immediately.
    fn from_op(shape: Vec<usize>, data: Vec<E>, op: Op<E>) -> Self {
        let participates = grad_enabled()
            && match &op {
                Op::Leaf => false,
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    a.requires_grad() || b.requires_grad()
                }
                Op::MatMul(a, b) | Op::MatMulNt(a, b) => a.requires_grad() || b.requires_grad(),
                Op::Neg(x)
                | Op::Scale(x, _)
                | Op::Gelu(x)
                | Op::SoftmaxRows(x)
                | Op::Reshape(x)
                | Op::Gather(x, _)
                | Op::MeanAll(x)
                | Op::SumAll(x) => x.requires_grad(),
                Op::LayerNorm { x, gamma, beta, .. } => {
                    x.requires_grad() || gamma.requires_grad() || beta.requires_grad()
                }
                Op::ConcatRows(parts) => parts.iter().any(|p| p.requires_grad()),
            };
        if participates {
            Tensor::make(shape, data, true, op)
        } else {
            Tensor::make(shape, data, false, Op::Leaf)
        }
    }

    /// Builds a leaf tensor, validating that `data` fills `shape` exactly.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        validate_shape(shape)?;
        if numel_of(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                details: format!("shape {shape:?} wants {} elements, got {}", numel_of(shape), data.len()),
            });
        }
        Ok(Tensor::make(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Builds a trainable leaf (a parameter).
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Self> {
        validate_shape(shape)?;
        if numel_of(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "param",
                details: format!("shape {shape:?} wants {} elements, got {}", numel_of(shape), data.len()),
            });
        }
        Ok(Tensor::make(shape.to_vec(), data, true, Op::Leaf))
    }

    /// All-zero leaf tensor.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        Ok(Tensor::make(
            shape.to_vec(),
            vec![E::zero(); numel_of(shape)],
            false,
            Op::Leaf,
        ))
    }

    /// Single-element leaf tensor.
    pub fn scalar(v: E) -> Self {
        Tensor::make(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Copies the element data out.
    pub fn to_vec(&self) -> Vec<E> {
        self.node.data.borrow().clone()
    }

    /// Runs `f` over the element data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[E]) -> R) -> R {
        f(&self.node.data.borrow())
    }

    /// Mutates the element data in place (optimizer updates, merges).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [E]) -> R) -> R {
        f(&mut self.node.data.borrow_mut())
    }

    /// Copies the accumulated gradient out, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.borrow().clone()
    }

    /// Runs `f` over the gradient data without copying.
    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[E]>) -> R) -> R {
        f(self.node.grad.borrow().as_deref())
    }

    /// Drops any accumulated gradient.
    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "item",
                details: format!("expected a scalar, got shape {:?}", self.shape()),
            });
        }
        Ok(self.node.data.borrow()[0])
    }

    fn rows_cols_last_axis(&self) -> (usize, usize) {
        let cols = *self.node.shape.last().expect("shapes are non-empty");
        (self.numel() / cols, cols)
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        Ok(())
    }

    // ---- elementwise ops ---------------------------------------------------

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = {
            let a = self.node.data.borrow();
            let b = other.node.data.borrow();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = {
            let a = self.node.data.borrow();
            let b = other.node.data.borrow();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "mul")?;
        let data = {
            let a = self.node.data.borrow();
            let b = other.node.data.borrow();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn neg(&self) -> Self {
        let data = self.node.data.borrow().iter().map(|&x| -x).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Neg(self.clone()))
    }

    /// Multiplication by a compile-time-known scalar.
    pub fn scale(&self, c: E) -> Self {
        let data = self.node.data.borrow().iter().map(|&x| x * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    // ---- matrix ops --------------------------------------------------------

    fn matmul_dims(&self, other: &Self, op: &'static str, transposed: bool) -> Result<(usize, usize, usize)> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("both operands must be rank 2, got {a:?} and {b:?}"),
            });
        }
        let (m, k) = (a[0], a[1]);
        let (inner, n) = if transposed { (b[1], b[0]) } else { (b[0], b[1]) };
        if k != inner {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("inner dims disagree: {a:?} vs {b:?}"),
            });
        }
        Ok((m, k, n))
    }

    /// `self @ other` for rank-2 operands.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = self.matmul_dims(other, "matmul", false)?;
        let mut out = vec![E::zero(); m * n];
        kernels::matmul_nn(
            &self.node.data.borrow(),
            &other.node.data.borrow(),
            m,
            k,
            n,
            &mut out,
        );
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    /// `self @ otherᵀ` for rank-2 operands — projections and attention
    /// scores without materializing a transpose in the graph.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = self.matmul_dims(other, "matmul_nt", true)?;
        let mut out = vec![E::zero(); m * n];
        kernels::matmul_nt(
            &self.node.data.borrow(),
            &other.node.data.borrow(),
            m,
            k,
            n,
            &mut out,
        );
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::MatMulNt(self.clone(), other.clone()),
        ))
    }

    // ---- nonlinearities ----------------------------------------------------

    pub fn gelu(&self) -> Self {
        let data = self
            .node
            .data
            .borrow()
            .iter()
            .map(|&x| kernels::gelu(x))
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Gelu(self.clone()))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self) -> Self {
        let (rows, cols) = self.rows_cols_last_axis();
        let mut out = vec![E::zero(); self.numel()];
        kernels::softmax_rows(&self.node.data.borrow(), rows, cols, &mut out);
        Tensor::from_op(self.shape().to_vec(), out, Op::SoftmaxRows(self.clone()))
    }

    /// Layer normalization over the last axis: `γ·(x−μ)/√(σ²+ε) + β`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        let (rows, cols) = self.rows_cols_last_axis();
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                details: format!(
                    "gamma/beta must have shape [{cols}], got {:?} and {:?}",
                    gamma.shape(),
                    beta.shape()
                ),
            });
        }
        let mut out = vec![E::zero(); self.numel()];
        {
            let x = self.node.data.borrow();
            let g = gamma.node.data.borrow();
            let b = beta.node.data.borrow();
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let (mean, rstd) = kernels::row_moments(row, eps);
                let out_row = &mut out[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    out_row[j] = (row[j] - mean) * rstd * g[j] + b[j];
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        ))
    }

    // ---- structural ops ----------------------------------------------------

    /// Same data, different shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if numel_of(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {shape:?} changes element count", self.shape()),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.node.data.borrow().clone(),
            Op::Reshape(self.clone()),
        ))
    }

    /// `out[i] = self[map[i]]` with the output shape carried by `map`.
    /// Backward scatter-adds, so repeated indices broadcast correctly.
    pub fn gather(&self, map: &Rc<IndexMap>) -> Result<Self> {
        if map.source_len != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                details: format!(
                    "index map built for source of {} elements, tensor has {}",
                    map.source_len,
                    self.numel()
                ),
            });
        }
        let data = {
            let x = self.node.data.borrow();
            map.map.iter().map(|&i| x[i as usize]).collect()
        };
        Ok(Tensor::from_op(
            map.out_shape.clone(),
            data,
            Op::Gather(self.clone(), Rc::clone(map)),
        ))
    }

    /// Concatenates along axis 0. All parts must share trailing dimensions.
    pub fn concat_rows(parts: &[Tensor<E>]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument(
                "concat_rows needs at least one tensor".into(),
            ));
        }
        let trailing = &parts[0].shape()[1..];
        let mut rows = 0;
        for p in parts {
            if &p.shape()[1..] != trailing {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    details: format!(
                        "trailing dims differ: {:?} vs {:?}",
                        parts[0].shape(),
                        p.shape()
                    ),
                });
            }
            rows += p.shape()[0];
        }
        let mut shape = Vec::with_capacity(trailing.len() + 1);
        shape.push(rows);
        shape.extend_from_slice(trailing);
        let mut data = Vec::with_capacity(numel_of(&shape));
        for p in parts {
            data.extend_from_slice(&p.node.data.borrow());
        }
        Ok(Tensor::from_op(
            shape,
            data,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    // ---- reductions ----------------------------------------------------------

    /// Mean over all elements, as a `[1]`-shaped tensor.
    pub fn mean_all(&self) -> Self {
        let n = E::from_f64_lossy(self.numel() as f64);
        let mut sum = E::zero();
        for &v in self.node.data.borrow().iter() {
            sum = sum + v;
        }
        Tensor::from_op(vec![1], vec![sum / n], Op::MeanAll(self.clone()))
    }

    /// Sum over all elements, as a `[1]`-shaped tensor.
    pub fn sum_all(&self) -> Self {
        let mut sum = E::zero();
        for &v in self.node.data.borrow().iter() {
            sum = sum + v;
        }
        Tensor::from_op(vec![1], vec![sum], Op::SumAll(self.clone()))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Accumulates `∂loss/∂leaf` into
    /// every reachable leaf with `requires_grad`; other tensors are untouched.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::InvalidArgument(
                "backward on a tensor that does not require grad".into(),
            ));
        }

        // Collect the reachable graph; descending id is reverse-topological.
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<Tensor<E>> = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            t.for_each_parent(|p| {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push(p.clone());
                }
            });
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        // Transient gradient buffers for every participating node; leaf
        // gradients are folded into `.grad` at the moment they are final.
        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);

        for node in &nodes {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.node.op {
                Op::Leaf => {
                    let mut slot = node.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, &gv) in acc.iter_mut().zip(&g) {
                                *a = *a + gv;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
                op => op.backward(node, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn for_each_parent(&self, mut f: impl FnMut(&Tensor<E>)) {
        match &self.node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MatMulNt(a, b) => {
                f(a);
                f(b);
            }
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::SoftmaxRows(x)
            | Op::Reshape(x)
            | Op::Gather(x, _)
            | Op::MeanAll(x)
            | Op::SumAll(x) => f(x),
            Op::LayerNorm { x, gamma, beta, .. } => {
                f(x);
                f(gamma);
                f(beta);
            }
            Op::ConcatRows(parts) => {
                for p in parts {
                    f(p);
                }
            }
        }
    }
}

impl<E: Scalar> Op<E> {
    /// Routes `g` (the output gradient of `out`) to the op's inputs.
    fn backward(&self, out: &Tensor<E>, g: &[E], grads: &mut HashMap<u64, Vec<E>>) {
        fn send<E: Scalar>(
            grads: &mut HashMap<u64, Vec<E>>,
            target: &Tensor<E>,
            contribution: impl FnOnce(&mut [E]),
        ) {
            if !target.requires_grad() {
                return;
            }
            let buf = grads
                .entry(target.id())
                .or_insert_with(|| vec![E::zero(); target.numel()]);
            contribution(buf);
        }

        match self {
            Op::Leaf => unreachable!("leaf backward handled by caller"),
            Op::Add(a, b) => {
                send(grads, a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o = *o + gv;
                    }
                });
                send(grads, b, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o = *o + gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                send(grads, a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o = *o + gv;
                    }
                });
                send(grads, b, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o = *o - gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                send(grads, a, |buf| {
                    let bd = b.node.data.borrow();
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(bd.iter()) {
                        *o = *o + gv * bv;
                    }
                });
                send(grads, b, |buf| {
                    let ad = a.node.data.borrow();
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(ad.iter()) {
                        *o = *o + gv * av;
                    }
                });
            }
            Op::Neg(x) => send(grads, x, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o = *o - gv;
                }
            }),
            Op::Scale(x, c) => send(grads, x, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o = *o + gv * *c;
                }
            }),
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                send(grads, a, |buf| {
                    // dA = dC @ Bᵀ
                    let mut da = vec![E::zero(); m * k];
                    kernels::matmul_nt(g, &b.node.data.borrow(), m, n, k, &mut da);
                    for (o, &v) in buf.iter_mut().zip(&da) {
                        *o = *o + v;
                    }
                });
                send(grads, b, |buf| {
                    // dB = Aᵀ @ dC
                    let mut db = vec![E::zero(); k * n];
                    kernels::matmul_tn(&a.node.data.borrow(), g, m, k, n, &mut db);
                    for (o, &v) in buf.iter_mut().zip(&db) {
                        *o = *o + v;
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[0];
                send(grads, a, |buf| {
                    // dA = dC @ B
                    let mut da = vec![E::zero(); m * k];
                    kernels::matmul_nn(g, &b.node.data.borrow(), m, n, k, &mut da);
                    for (o, &v) in buf.iter_mut().zip(&da) {
                        *o = *o + v;
                    }
                });
                send(grads, b, |buf| {
                    // dB = dCᵀ @ A
                    let mut db = vec![E::zero(); n * k];
                    kernels::matmul_tn(g, &a.node.data.borrow(), m, n, k, &mut db);
                    for (o, &v) in buf.iter_mut().zip(&db) {
                        *o = *o + v;
                    }
                });
            }
            Op::Gelu(x) => send(grads, x, |buf| {
                let xd = x.node.data.borrow();
                for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(xd.iter()) {
                    *o = *o + gv * kernels::gelu_grad(xv);
                }
            }),
            Op::SoftmaxRows(x) => send(grads, x, |buf| {
                let (rows, cols) = out.rows_cols_last_axis();
                let y = out.node.data.borrow();
                for r in 0..rows {
                    let y_row = &y[r * cols..(r + 1) * cols];
                    let g_row = &g[r * cols..(r + 1) * cols];
                    let mut dot = E::zero();
                    for (&yv, &gv) in y_row.iter().zip(g_row) {
                        dot = dot + yv * gv;
                    }
                    let out_row = &mut buf[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        out_row[j] = out_row[j] + y_row[j] * (g_row[j] - dot);
                    }
                }
            }),
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (rows, cols) = x.rows_cols_last_axis();
                let xd = x.node.data.borrow();
                let gd = gamma.node.data.borrow();
                let inv_n = E::one() / E::from_f64_lossy(cols as f64);
                send(grads, beta, |buf| {
                    for r in 0..rows {
                        let g_row = &g[r * cols..(r + 1) * cols];
                        for (o, &gv) in buf.iter_mut().zip(g_row) {
                            *o = *o + gv;
                        }
                    }
                });
                send(grads, gamma, |buf| {
                    for r in 0..rows {
                        let row = &xd[r * cols..(r + 1) * cols];
                        let (mean, rstd) = kernels::row_moments(row, *eps);
                        let g_row = &g[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            buf[j] = buf[j] + g_row[j] * (row[j] - mean) * rstd;
                        }
                    }
                });
                send(grads, x, |buf| {
                    for r in 0..rows {
                        let row = &xd[r * cols..(r + 1) * cols];
                        let (mean, rstd) = kernels::row_moments(row, *eps);
                        let g_row = &g[r * cols..(r + 1) * cols];
                        // h = γ ⊙ g; dx = rstd·(h − mean(h) − x̂·mean(h ⊙ x̂))
                        let mut h_mean = E::zero();
                        let mut hx_mean = E::zero();
                        for j in 0..cols {
                            let h = gd[j] * g_row[j];
                            let xhat = (row[j] - mean) * rstd;
                            h_mean = h_mean + h;
                            hx_mean = hx_mean + h * xhat;
                        }
                        h_mean = h_mean * inv_n;
                        hx_mean = hx_mean * inv_n;
                        let out_row = &mut buf[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let h = gd[j] * g_row[j];
                            let xhat = (row[j] - mean) * rstd;
                            out_row[j] = out_row[j] + rstd * (h - h_mean - xhat * hx_mean);
                        }
                    }
                });
            }
            Op::Reshape(x) => send(grads, x, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o = *o + gv;
                }
            }),
            Op::Gather(x, map) => send(grads, x, |buf| {
                for (i, &src) in map.map.iter().enumerate() {
                    buf[src as usize] = buf[src as usize] + g[i];
                }
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = p.numel();
                    let piece = &g[offset..offset + len];
                    send(grads, p, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(piece) {
                            *o = *o + gv;
                        }
                    });
                    offset += len;
                }
            }
            Op::MeanAll(x) => send(grads, x, |buf| {
                let gv = g[0] / E::from_f64_lossy(x.numel() as f64);
                for o in buf.iter_mut() {
                    *o = *o + gv;
                }
            }),
            Op::SumAll(x) => send(grads, x, |buf| {
                for o in buf.iter_mut() {
                    *o = *o + g[0];
                }
            }),
        }
    }
}

//! Reverse-mode differentiation over a closed set of tensor operations.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order. Nodes whose inputs do not require gradients are
//! still evaluated but never visited by [`Graph::backward`].

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{broadcast_index_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Floor applied inside `log` and entropy-style terms.
pub const LOG_EPS: f64 = 1e-12;
/// Norm floor for L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    MatMul,
    TransposeLast,
    Reshape,
    Narrow { axis: usize, start: usize },
    Concat { axis: usize },
    SumAll,
    MeanAll,
    SumAxis,
    Softmax,
    LogSoftmax,
    LogSumExp,
    LayerNorm { eps: f64 },
    L2Normalize,
    Gelu,
    Relu,
    Exp,
    Log,
    Sin,
    Softplus,
    MaskedFill { mask: Rc<Vec<bool>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul => "matmul",
            Op::TransposeLast => "transpose",
            Op::Reshape => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::SumAxis => "sum_axis",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LogSumExp => "logsumexp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize => "l2_normalize",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sin => "sin",
            Op::Softplus => "softplus",
            Op::MaskedFill { .. } => "masked_fill",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// Operation record for one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    backward_done: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl PartialEq for Var<'_> {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self.graph, other.graph) && self.id == other.id
    }
}

impl Eq for Var<'_> {}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shapes of all recorded values, in creation order.
    pub fn node_shapes(&self) -> Vec<Vec<usize>> {
        self.nodes.borrow().iter().map(|n| n.value.shape().to_vec()).collect()
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert!(inputs.iter().all(|&i| i < nodes.len()));
        nodes.push(Node {
            op,
            inputs,
            value: Rc::new(value),
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, op: Op, inputs: &[Var<'_>], value: Tensor) -> Var<'_> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = ids.iter().any(|&i| self.requires_grad_of(i));
        self.push(op, ids, value, rg)
    }

    /// Clears stored gradients so that `backward` may run again.
    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Accumulates d(root)/d(node) for every node that requires a gradient.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::Autodiff(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be a scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Err(Error::Autodiff(
                "backward root does not depend on any gradient-requiring leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::full(root_node.value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &*nodes[i].value).collect();
            let in_grads = backward_op(&node.op, &inputs, &node.value, &g);
            for (&inp, ig) in node.inputs.iter().zip(in_grads) {
                if !nodes[inp].requires_grad {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }
}

fn shape_err(op: &str, shapes: &[&[usize]]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {shapes:?}"))
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Gradient accumulated by the last `backward`; `None` when no gradient reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grads.borrow().get(self.id).cloned().flatten()
    }

    /// Value-identical node through which no gradient flows.
    pub fn detach(self) -> Var<'g> {
        let v = (*self.value()).clone();
        self.graph.constant(v)
    }

    fn unary(self, op: Op, value: Tensor) -> Var<'g> {
        self.graph.record(op, &[self], value)
    }

    fn binary_broadcast(self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| shape_err(op.name(), &[a.shape(), b.shape()]))?;
        let data: Vec<f64> = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(a.shape(), &out_shape);
            let mb = broadcast_index_map(b.shape(), &out_shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                .collect()
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.graph.record(op, &[self, other], value))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_broadcast(other, Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_broadcast(other, Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_broadcast(other, Op::Mul, |x, y| x * y)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_broadcast(other, Op::Div, |x, y| x / y)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x * c);
        self.unary(Op::Scale(c), v)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.unary(Op::AddScalar, v)
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `self` is `[.., m, k]`; `other` is either `[.., k, n]` with identical leading
    /// axes or a plain `[k, n]` matrix shared across the batch.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let dims = matmul_dims(a.shape(), b.shape())
            .ok_or_else(|| shape_err("matmul", &[a.shape(), b.shape()]))?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        batched_gemm(&dims, a.data(), false, b.data(), false, &mut out, 0.0);
        let mut shape = a.shape()[..a.ndim() - 2].to_vec();
        shape.extend([dims.m, dims.n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.graph.record(Op::MatMul, &[self, other], value))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let a = self.value();
        if a.ndim() < 2 {
            return Err(shape_err("transpose", &[a.shape()]));
        }
        let value = transpose_last(&a);
        Ok(self.unary(Op::TransposeLast, value))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let value = (*a).clone().reshaped(shape.to_vec()).map_err(|_| shape_err("reshape", &[a.shape(), shape]))?;
        Ok(self.unary(Op::Reshape, value))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        if axis >= a.ndim() || start + len > a.shape()[axis] {
            return Err(Error::Shape(format!(
                "narrow: range {start}..{} on axis {axis} out of bounds for {:?}",
                start + len,
                a.shape()
            )));
        }
        let (outer, dim, inner) = split_axis(a.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.unary(Op::Narrow { axis, start }, value))
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(Op::SumAll, v)
    }

    pub fn mean(self) -> Var<'g> {
        let a = self.value();
        let v = Tensor::scalar(a.sum() / a.numel() as f64);
        self.unary(Op::MeanAll, v)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        if axis >= a.ndim() {
            return Err(shape_err("sum_axis", &[a.shape()]));
        }
        let (outer, dim, inner) = split_axis(a.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &a.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, data)?;
        Ok(self.unary(Op::SumAxis, value))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let n = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    pub fn softmax(self) -> Var<'g> {
        let a = self.value();
        let v = rowwise(&a, softmax_row);
        self.unary(Op::Softmax, v)
    }

    pub fn log_softmax(self) -> Var<'g> {
        let a = self.value();
        let v = rowwise(&a, |row, out| {
            let lse = logsumexp(row);
            for (o, &x) in out.iter_mut().zip(row) {
                *o = x - lse;
            }
        });
        self.unary(Op::LogSoftmax, v)
    }

    /// Log-sum-exp over the last axis, keeping it with size 1.
    pub fn logsumexp(self) -> Var<'g> {
        let a = self.value();
        let c = a.last_dim();
        let data: Vec<f64> = a.data().chunks(c).map(logsumexp).collect();
        let mut shape = a.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        self.unary(Op::LogSumExp, Tensor::new(shape, data).expect("shape"))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        let a = self.value();
        let v = rowwise(&a, |row, out| {
            let (mean, rstd) = moments(row, eps);
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - mean) * rstd;
            }
        });
        self.unary(Op::LayerNorm { eps }, v)
    }

    pub fn l2_normalize(self) -> Var<'g> {
        let a = self.value();
        let v = rowwise(&a, |row, out| {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            for (o, &x) in out.iter_mut().zip(row) {
                *o = x / n;
            }
        });
        self.unary(Op::L2Normalize, v)
    }

    pub fn gelu(self) -> Var<'g> {
        let v = self.value().map(gelu);
        self.unary(Op::Gelu, v)
    }

    pub fn relu(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(Op::Relu, v)
    }

    pub fn exp(self) -> Var<'g> {
        let v = self.value().map(f64::exp);
        self.unary(Op::Exp, v)
    }

    /// Natural log with inputs floored at [`LOG_EPS`].
    pub fn log(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(LOG_EPS).ln());
        self.unary(Op::Log, v)
    }

    pub fn sin(self) -> Var<'g> {
        let v = self.value().map(f64::sin);
        self.unary(Op::Sin, v)
    }

    pub fn softplus(self) -> Var<'g> {
        let v = self.value().map(softplus);
        self.unary(Op::Softplus, v)
    }

    /// Replaces entries where `mask` is true by `value`; masked entries get zero gradient.
    pub fn masked_fill(self, mask: Vec<bool>, value: f64) -> Result<Var<'g>> {
        let a = self.value();
        if mask.len() != a.numel() {
            return Err(Error::Shape(format!(
                "masked_fill: mask of length {} for tensor {:?}",
                mask.len(),
                a.shape()
            )));
        }
        let mut v = (*a).clone();
        for (x, &m) in v.data_mut().iter_mut().zip(&mask) {
            if m {
                *x = value;
            }
        }
        Ok(self.unary(Op::MaskedFill { mask: Rc::new(mask) }, v))
    }
}

/// Concatenates along `axis`; all other axes must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat: no inputs".into()))?;
    let graph = first.graph;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(shape_err("concat", &[&base]));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            let shapes: Vec<&[usize]> = values.iter().map(|v| v.shape()).collect();
            return Err(shape_err("concat", &shapes));
        }
    }
    let (outer, _, inner) = split_axis(&base, axis);
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let d = v.shape()[axis];
            data.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let value = Tensor::new(shape, data)?;
    Ok(graph.record(Op::Concat { axis }, parts, value))
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn rowwise(a: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let c = a.last_dim();
    let mut out = vec![0.0; a.numel()];
    for (row, o) in a.data().chunks(c).zip(out.chunks_mut(c)) {
        f(row, o);
    }
    Tensor::new(a.shape().to_vec(), out).expect("same shape")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_last(a: &Tensor) -> Tensor {
    let nd = a.ndim();
    let (r, c) = (a.shape()[nd - 2], a.shape()[nd - 1]);
    let batch = a.numel() / (r * c).max(1);
    let mut out = vec![0.0; a.numel()];
    for b in 0..batch {
        let src = &a.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(shape, out).expect("same numel")
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return None;
    }
    let batch_a = &a[..a.len() - 2];
    let batch_b = &b[..b.len() - 2];
    let shared_rhs = batch_b.is_empty();
    if !shared_rhs && batch_a != batch_b {
        return None;
    }
    Some(MatmulDims {
        batch: batch_a.iter().product(),
        m,
        k,
        n,
        shared_rhs,
    })
}

/// `out[b] = beta * out[b] + op(a[b]) · op(bm[b])` where `op` optionally transposes.
///
/// `a` and `bm` are stored with their *untransposed* logical layout; `dims`
/// describes the product after transposition.
fn batched_gemm(dims: &MatmulDims, a: &[f64], ta: bool, bm: &[f64], tb: bool, out: &mut [f64], beta: f64) {
    let MatmulDims { batch, m, k, n, shared_rhs } = *dims;
    // row/col strides of the logical (post-transpose) operands
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    for bi in 0..batch {
        let a_off = bi * m * k;
        let b_off = if shared_rhs { 0 } else { bi * k * n };
        let c_off = bi * m * n;
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a[a_off..].as_ptr(),
                rsa as isize,
                csa as isize,
                bm[b_off..].as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                out[c_off..].as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Sums a broadcast gradient back to `in_shape`.
fn reduce_to(g: &Tensor, in_shape: &[usize]) -> Tensor {
    if g.shape() == in_shape {
        return g.clone();
    }
    let map = broadcast_index_map(in_shape, g.shape());
    let mut out = Tensor::zeros(in_shape);
    let od = out.data_mut();
    for (&i, &v) in map.iter().zip(g.data()) {
        od[i] += v;
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let map = broadcast_index_map(t.shape(), shape);
    let data = map.iter().map(|&i| t.data()[i]).collect();
    Tensor::new(shape.to_vec(), data).expect("broadcast")
}

fn backward_op(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
    match op {
        Op::Leaf => vec![],
        Op::Add => vec![
            Some(reduce_to(g, inputs[0].shape())),
            Some(reduce_to(g, inputs[1].shape())),
        ],
        Op::Sub => vec![
            Some(reduce_to(g, inputs[0].shape())),
            Some(reduce_to(&g.map(|x| -x), inputs[1].shape())),
        ],
        Op::Mul => {
            let a = broadcast_to(inputs[0], g.shape());
            let b = broadcast_to(inputs[1], g.shape());
            vec![
                Some(reduce_to(&zip_map(g, &b, |x, y| x * y), inputs[0].shape())),
                Some(reduce_to(&zip_map(g, &a, |x, y| x * y), inputs[1].shape())),
            ]
        }
        Op::Div => {
            let a = broadcast_to(inputs[0], g.shape());
            let b = broadcast_to(inputs[1], g.shape());
            let ga = zip_map(g, &b, |x, y| x / y);
            let gb_full = Tensor::new(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(a.data())
                    .zip(b.data())
                    .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                    .collect(),
            )
            .expect("shape");
            vec![
                Some(reduce_to(&ga, inputs[0].shape())),
                Some(reduce_to(&gb_full, inputs[1].shape())),
            ]
        }
        Op::Scale(c) => vec![Some(g.map(|x| x * c))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let dims = matmul_dims(a.shape(), b.shape()).expect("checked on forward");
            // dA = G · Bᵀ
            let da_dims = MatmulDims { m: dims.m, k: dims.n, n: dims.k, ..dims };
            let mut da = vec![0.0; a.numel()];
            batched_gemm(&da_dims, g.data(), false, b.data(), true, &mut da, 0.0);
            // dB = Aᵀ · G, summed over the batch when B is shared
            let mut db = vec![0.0; b.numel()];
            if dims.shared_rhs {
                let flat = MatmulDims {
                    batch: 1,
                    m: dims.k,
                    k: dims.batch * dims.m,
                    n: dims.n,
                    shared_rhs: true,
                };
                batched_gemm(&flat, a.data(), true, g.data(), false, &mut db, 0.0);
            } else {
                let db_dims = MatmulDims { m: dims.k, k: dims.m, n: dims.n, ..dims };
                batched_gemm(&db_dims, a.data(), true, g.data(), false, &mut db, 0.0);
            }
            vec![
                Some(Tensor::new(a.shape().to_vec(), da).expect("shape")),
                Some(Tensor::new(b.shape().to_vec(), db).expect("shape")),
            ]
        }
        Op::TransposeLast => vec![Some(transpose_last(g))],
        Op::Reshape => vec![Some(g.clone().reshaped(inputs[0].shape().to_vec()).expect("numel"))],
        Op::Narrow { axis, start } => {
            let a = inputs[0];
            let (outer, dim, inner) = split_axis(a.shape(), *axis);
            let len = g.shape()[*axis];
            let mut out = Tensor::zeros(a.shape());
            let od = out.data_mut();
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                od[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(out)]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .map(|inp| {
                    let d = inp.shape()[*axis];
                    let mut data = Vec::with_capacity(inp.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + d * inner]);
                    }
                    offset += d;
                    Some(Tensor::new(inp.shape().to_vec(), data).expect("shape"))
                })
                .collect()
        }
        Op::SumAll => vec![Some(Tensor::full(inputs[0].shape(), g.item()))],
        Op::MeanAll => {
            let n = inputs[0].numel() as f64;
            vec![Some(Tensor::full(inputs[0].shape(), g.item() / n))]
        }
        Op::SumAxis => vec![Some(broadcast_to(g, inputs[0].shape()))],
        Op::Softmax => {
            let c = out.last_dim();
            let mut dx = vec![0.0; out.numel()];
            for ((y, gr), d) in out.data().chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)) {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((dv, &yv), &gv) in d.iter_mut().zip(y).zip(gr) {
                    *dv = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::new(out.shape().to_vec(), dx).expect("shape"))]
        }
        Op::LogSoftmax => {
            let c = out.last_dim();
            let mut dx = vec![0.0; out.numel()];
            for ((y, gr), d) in out.data().chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)) {
                let gsum: f64 = gr.iter().sum();
                for ((dv, &yv), &gv) in d.iter_mut().zip(y).zip(gr) {
                    *dv = gv - yv.exp() * gsum;
                }
            }
            vec![Some(Tensor::new(out.shape().to_vec(), dx).expect("shape"))]
        }
        Op::LogSumExp => {
            let x = inputs[0];
            let c = x.last_dim();
            let mut dx = vec![0.0; x.numel()];
            for (((row, d), &lse), &gv) in x
                .data()
                .chunks(c)
                .zip(dx.chunks_mut(c))
                .zip(out.data())
                .zip(g.data())
            {
                for (dv, &xv) in d.iter_mut().zip(row) {
                    *dv = gv * (xv - lse).exp();
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx).expect("shape"))]
        }
        Op::LayerNorm { eps } => {
            let x = inputs[0];
            let c = x.last_dim();
            let mut dx = vec![0.0; x.numel()];
            for (((row, y), gr), d) in x
                .data()
                .chunks(c)
                .zip(out.data().chunks(c))
                .zip(g.data().chunks(c))
                .zip(dx.chunks_mut(c))
            {
                let (_, rstd) = moments(row, *eps);
                let n = c as f64;
                let gmean = gr.iter().sum::<f64>() / n;
                let gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((dv, &gv), &yv) in d.iter_mut().zip(gr).zip(y) {
                    *dv = rstd * (gv - gmean - yv * gy);
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx).expect("shape"))]
        }
        Op::L2Normalize => {
            let x = inputs[0];
            let c = x.last_dim();
            let mut dx = vec![0.0; x.numel()];
            for (((row, y), gr), d) in x
                .data()
                .chunks(c)
                .zip(out.data().chunks(c))
                .zip(g.data().chunks(c))
                .zip(dx.chunks_mut(c))
            {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < NORM_EPS {
                    for (dv, &gv) in d.iter_mut().zip(gr) {
                        *dv = gv / NORM_EPS;
                    }
                    continue;
                }
                let yg: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((dv, &gv), &yv) in d.iter_mut().zip(gr).zip(y) {
                    *dv = (gv - yv * yg) / norm;
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx).expect("shape"))]
        }
        Op::Gelu => vec![Some(zip_map(g, inputs[0], |gv, x| gv * gelu_grad(x)))],
        Op::Relu => vec![Some(zip_map(g, inputs[0], |gv, x| if x > 0.0 { gv } else { 0.0 }))],
        Op::Exp => vec![Some(zip_map(g, out, |gv, y| gv * y))],
        Op::Log => vec![Some(zip_map(g, inputs[0], |gv, x| if x > LOG_EPS { gv / x } else { 0.0 }))],
        Op::Sin => vec![Some(zip_map(g, inputs[0], |gv, x| gv * x.cos()))],
        Op::Softplus => vec![Some(zip_map(g, inputs[0], |gv, x| gv * sigmoid(x)))],
        Op::MaskedFill { mask } => {
            let mut dx = g.clone();
            for (d, &m) in dx.data_mut().iter_mut().zip(mask.iter()) {
                if m {
                    *d = 0.0;
                }
            }
            vec![Some(dx)]
        }
    }
}

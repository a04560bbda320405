//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! appended after their inputs, so the tape is already in topological order
//! and [`Tape::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

const L2_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    LayerNorm { input: usize, inv_std: Vec<f64> },
    Softmax(usize),
    LogSoftmax(usize),
    L2Normalize { input: usize, norms: Vec<f64> },
    Sum(usize),
    Mean(usize),
    SumAxis { input: usize, axis: usize },
    Reshape(usize),
    Permute { input: usize, perm: Vec<usize> },
    Narrow { input: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Conv1d { input: usize, weight: usize, bias: usize, padding: usize },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNorm { input, .. }
            | Op::L2Normalize { input, .. }
            | Op::SumAxis { input, .. }
            | Op::Permute { input, .. }
            | Op::Narrow { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv1d {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Records operations for one forward pass.
///
/// A tape is single-threaded; independent tapes share nothing and may be
/// used from different threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// Gradients of a scalar output with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros shaped like it when it received none.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf; it is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        self.leaf_shared(Arc::new(tensor))
    }

    /// Registers a leaf without copying its data.
    pub fn leaf_shared(&self, tensor: Arc<Tensor>) -> Var<'_> {
        let tracked = tensor.requires_grad();
        self.push_node(tensor, Op::Leaf, tracked)
    }

    /// Registers an untracked leaf regardless of its flag.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push_node(Arc::new(tensor.with_requires_grad(false)), Op::Leaf, false)
    }

    pub fn param(&self, tensor: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_node(tensor, Op::Leaf, requires_grad)
    }

    fn push_node(&self, value: Arc<Tensor>, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let tracked = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].tracked)
        };
        let value = value.with_requires_grad(tracked);
        self.push_node(Arc::new(value), op, tracked)
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: out.value.shape().to_vec(),
            });
        }
        if !out.tracked {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(grad);
                continue;
            }
            backward_node(&nodes, id, &grad, &mut grads);
            // keep intermediate gradients so callers can inspect them
            grads[id] = Some(grad);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| nodes[id].tracked)
                    .map(|g| Tensor::from_parts(nodes[id].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

/// Sum `full` (shaped like the broadcast output) down to a trailing-suffix shape.
fn reduce_to_suffix(full: &[f64], suffix_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; suffix_len];
    for chunk in full.chunks(suffix_len) {
        out.iter_mut().zip(chunk).for_each(|(o, c)| *o += c);
    }
    out
}

fn backward_node(nodes: &[Node], id: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            accumulate(grads, nodes, *a, grad.to_vec());
            if nodes[*b].tracked {
                let blen = nodes[*b].value.len();
                let mut gb = reduce_to_suffix(grad, blen);
                if sign < 0.0 {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let blen = bv.len();
            if nodes[*a].tracked {
                let ga = grad
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * bv[i % blen])
                    .collect();
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].tracked {
                let prod: Vec<f64> = grad.iter().zip(av).map(|(g, x)| g * x).collect();
                accumulate(grads, nodes, *b, reduce_to_suffix(&prod, blen));
            }
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, grad.iter().map(|g| g * c).collect());
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, grad.to_vec()),
        Op::MatMul(a, b) => {
            let need = (nodes[*a].tracked, nodes[*b].tracked);
            let (ga, gb) = kernels::matmul_backward(&nodes[*a].value, &nodes[*b].value, grad, need);
            if let Some(ga) = ga {
                accumulate(grads, nodes, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            let g = grad
                .iter()
                .zip(x)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::Gelu(a) => {
            let x = nodes[*a].value.data();
            let g = grad.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::Tanh(a) => {
            let g = grad
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::Exp(a) => {
            let g = grad.iter().zip(out.data()).map(|(g, y)| g * y).collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            let g = grad.iter().zip(x).map(|(g, x)| g / x).collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::LayerNorm { input, inv_std } => {
            let n = *out.shape().last().unwrap();
            let xhat = out.data();
            let mut gx = vec![0.0; grad.len()];
            for (r, &s) in inv_std.iter().enumerate() {
                let dy = &grad[r * n..(r + 1) * n];
                let xh = &xhat[r * n..(r + 1) * n];
                let mean_dy = dy.iter().sum::<f64>() / n as f64;
                let mean_dyx = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    gx[r * n + j] = s * (dy[j] - mean_dy - xh[j] * mean_dyx);
                }
            }
            accumulate(grads, nodes, *input, gx);
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            let y = out.data();
            let mut gx = vec![0.0; grad.len()];
            for r in 0..grad.len() / n {
                let dy = &grad[r * n..(r + 1) * n];
                let yr = &y[r * n..(r + 1) * n];
                let dot: f64 = dy.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    gx[r * n + j] = yr[j] * (dy[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, gx);
        }
        Op::LogSoftmax(a) => {
            let n = *out.shape().last().unwrap();
            let y = out.data();
            let mut gx = vec![0.0; grad.len()];
            for r in 0..grad.len() / n {
                let dy = &grad[r * n..(r + 1) * n];
                let total: f64 = dy.iter().sum();
                for j in 0..n {
                    gx[r * n + j] = dy[j] - y[r * n + j].exp() * total;
                }
            }
            accumulate(grads, nodes, *a, gx);
        }
        Op::L2Normalize { input, norms } => {
            let n = *out.shape().last().unwrap();
            let y = out.data();
            let mut gx = vec![0.0; grad.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let dy = &grad[r * n..(r + 1) * n];
                let yr = &y[r * n..(r + 1) * n];
                if norm > L2_EPS {
                    let dot: f64 = dy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = (dy[j] - yr[j] * dot) / norm;
                    }
                } else {
                    for j in 0..n {
                        gx[r * n + j] = dy[j] / L2_EPS;
                    }
                }
            }
            accumulate(grads, nodes, *input, gx);
        }
        Op::Sum(a) => {
            let len = nodes[*a].value.len();
            accumulate(grads, nodes, *a, vec![grad[0]; len]);
        }
        Op::Mean(a) => {
            let len = nodes[*a].value.len();
            accumulate(grads, nodes, *a, vec![grad[0] / len as f64; len]);
        }
        Op::SumAxis { input, axis } => {
            let shape = nodes[*input].value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let dim = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut gx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                for d in 0..dim {
                    let dst = (o * dim + d) * inner;
                    gx[dst..dst + inner].copy_from_slice(&grad[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, nodes, *input, gx);
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, grad.to_vec()),
        Op::Permute { input, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let gx = kernels::permute(out.shape(), grad, &inverse);
            accumulate(grads, nodes, *input, gx.1);
        }
        Op::Narrow { input, axis, start } => {
            let shape = nodes[*input].value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let dim = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let len = out.shape()[*axis];
            let mut gx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * dim + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
            }
            accumulate(grads, nodes, *input, gx);
        }
        Op::Concat { inputs, axis } => {
            let out_shape = out.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let dim = nodes[inp].value.shape()[*axis];
                if nodes[inp].tracked {
                    let mut gx = Vec::with_capacity(outer * dim * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gx.extend_from_slice(&grad[src..src + dim * inner]);
                    }
                    accumulate(grads, nodes, inp, gx);
                }
                offset += dim;
            }
        }
        Op::Conv1d {
            input,
            weight,
            bias,
            padding,
        } => {
            let need_params = nodes[*weight].tracked || nodes[*bias].tracked;
            let (gx, params) = kernels::conv1d_backward(&nodes[*input].value, &nodes[*weight].value, *padding, grad, need_params);
            accumulate(grads, nodes, *input, gx);
            if let Some((gw, gb)) = params {
                accumulate(grads, nodes, *weight, gw);
                accumulate(grads, nodes, *bias, gb);
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(TensorError::shape(op, &[shape])),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    fn binary_broadcast(
        self,
        other: Var<'t>,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let a = self.value();
        let b = other.value();
        if !is_suffix(a.shape(), b.shape()) {
            return Err(TensorError::shape(op_name, &[a.shape(), b.shape()]));
        }
        let blen = b.len();
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % blen]))
            .collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    /// Elementwise sum; `other` may match a trailing suffix of `self`'s shape
    /// and is then repeated across the leading dimensions.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary_broadcast(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary_broadcast(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary_broadcast(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.tape.push(v, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.tape.push(v, Op::AddScalar(self.id))
    }

    /// Matrix product. Supported forms: `[m,k]x[k,n]`, batched
    /// `[b,m,k]x[b,k,n]`, and `[...,k]x[k,n]` with leading dims flattened.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id)))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.push(v, Op::Relu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.tape.push(v, Op::Gelu(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.tape.push(v, Op::Tanh(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.tape.push(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.tape.push(v, Op::Log(self.id))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let n = last_dim("layer_norm", x.shape())?;
        let rows = x.len() / n;
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * s;
            }
            inv_std.push(s);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape.push(v, Op::LayerNorm { input: self.id, inv_std }))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = last_dim("softmax", x.shape())?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape.push(v, Op::Softmax(self.id)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = last_dim("log_softmax", x.shape())?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape.push(v, Op::LogSoftmax(self.id)))
    }

    /// Scales each last-axis row to unit L2 norm (`x / max(|x|, 1e-12)`).
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = last_dim("l2_normalize", x.shape())?;
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(L2_EPS);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(norm);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape.push(v, Op::L2Normalize { input: self.id, norms }))
    }

    /// Sum of all elements, as a zero-dimensional tensor.
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.tape.push(v, Op::Mean(self.id))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(TensorError::Index {
                op: "sum_axis",
                index: axis,
                shape: shape.to_vec(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = (o * dim + d) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[src + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let v = Tensor::from_parts(out_shape, out);
        Ok(self.tape.push(v, Op::SumAxis { input: self.id, axis }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let dim = *self.shape().get(axis).ok_or_else(|| TensorError::Index {
            op: "mean_axis",
            index: axis,
            shape: self.shape(),
        })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / dim as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; perm.len()];
        let valid = perm.len() == x.ndim()
            && perm.iter().all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::shape("permute", &[x.shape(), perm]));
        }
        let (shape, data) = kernels::permute(x.shape(), x.data(), perm);
        let v = Tensor::from_parts(shape, data);
        Ok(self.tape.push(
            v,
            Op::Permute {
                input: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(TensorError::shape("transpose", &[&self.shape()]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                shape: shape.to_vec(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * dim + start) * inner;
            out.extend_from_slice(&x.data()[src..src + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let v = Tensor::from_parts(out_shape, out);
        Ok(self.tape.push(
            v,
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let tape = first.tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Index {
                op: "concat",
                index: axis,
                shape: base,
            });
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                let shapes: Vec<&[usize]> = values.iter().map(|v| v.shape()).collect();
                return Err(TensorError::shape("concat", &shapes));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let dim = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::from_parts(shape, out);
        Ok(tape.push(
            v,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// 1D convolution, stride 1. `self`: `[batch, c_in, len]`,
    /// `weight`: `[c_out, c_in, k]`, `bias`: `[c_out]`.
    pub fn conv1d(self, weight: Var<'t>, bias: Var<'t>, padding: usize) -> Result<Var<'t>> {
        let v = kernels::conv1d(&self.value(), &weight.value(), &bias.value(), padding)?;
        Ok(self.tape.push(
            v,
            Op::Conv1d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                padding,
            },
        ))
    }

    pub fn backward(self) -> Result<Gradients> {
        self.tape.backward(self)
    }
}

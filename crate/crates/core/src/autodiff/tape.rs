//! Tensor-level reverse-mode tape.
//!
//! Every operation appends a node holding its output value and enough
//! information about its inputs to replay the adjoint. Nodes only refer to
//! earlier nodes, so a single reverse sweep over the node list is a valid
//! topological order for backpropagation.

use super::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, split_at_axis, transpose_into};
use super::{DiffError, ParamId, ParamStore, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Tolerance for "sums to one" checks on probability vectors.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    CrossEntropy { probs: Var, target: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Mean { input: Var, axis: usize },
    Max { input: Var, axis: usize, argmax: Vec<usize> },
    SumAll(Var),
    RowNorms(Var),
    NormalizeRows(Var),
    SelectRows { input: Var, indices: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Multiplies the gradient delivered to one parameter by `scale`.
///
/// Exists only so gradient checking can be shown to catch a broken adjoint.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointFault {
    pub param: ParamId,
    pub scale: f64,
}

/// Record of executed operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<AdjointFault>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.per_node.get(var.0).and_then(Option::as_ref)
    }

    /// Adds the parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.get_mut(*id).grad.add_scaled(g, 1.0);
        }
    }
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), DiffError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(DiffError::RankMismatch {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        }),
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<AdjointFault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                op: op_name(&op),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        assert!(value.is_finite(), "constant must be finite");
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        assert!(value.is_finite(), "input must be finite");
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf; its gradient is routed back to `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        assert!(value.is_finite(), "parameter {} is not finite", store.get(id).name);
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", av)?;
        let (k2, n) = require_matrix("matmul", bv)?;
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        let (m, n) = require_matrix("transpose", av)?;
        let mut out = vec![0.0; m * n];
        transpose_into(av.data(), m, n, &mut out);
        let rg = self.rg(a);
        self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        sign: f64,
    ) -> Result<(Tensor, bool), DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + sign * y)
            .collect();
        Ok((Tensor::new(av.shape(), data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (t, rg) = self.binary("add", a, b, 1.0)?;
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (t, rg) = self.binary("sub", a, b, -1.0)?;
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, DiffError> {
        let t = self.value(a).map(|v| v * factor);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Elementwise `max(0, x)`. The subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        let (m, n) = require_matrix("softmax_rows", av)?;
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[m, n], out)?, Op::SoftmaxRows(a), rg)
    }

    /// `-ln(max(probs[target], 1e-12))` for a probability vector of shape
    /// `[C]` or `[1, C]`.
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var, DiffError> {
        let pv = self.value(probs);
        let classes = match *pv.shape() {
            [c] | [1, c] => c,
            _ => {
                return Err(DiffError::RankMismatch {
                    op: "cross_entropy",
                    expected: 1,
                    shape: pv.shape().to_vec(),
                })
            }
        };
        if target >= classes {
            return Err(DiffError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                bound: classes,
            });
        }
        let sum = pv.sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOL || pv.data().iter().any(|&p| p < 0.0) {
            return Err(DiffError::NotADistribution { sum });
        }
        let loss = -pv.data()[target].max(LOG_CLAMP).ln();
        let rg = self.rg(probs);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { probs, target }, rg)
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = self.value(*inputs.first().ok_or(DiffError::EmptyInput { op: "concat" })?);
        let rank = first.rank();
        if axis >= rank {
            return Err(DiffError::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &v in inputs {
            let t = self.value(v);
            let compatible = t.rank() == rank
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", first, t));
            }
            shape[axis] += t.shape()[axis];
        }
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Mean over `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(DiffError::AxisOutOfRange {
                op: "mean",
                axis,
                rank: av.rank(),
            });
        }
        let (outer, n, inner) = split_at_axis(av.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let src = av.data();
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let shape = reduced_shape(av.shape(), axis);
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out)?, Op::Mean { input: a, axis }, rg)
    }

    /// Maximum over `axis`. The adjoint flows only to the arg-max element;
    /// ties resolve to the lowest index.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(DiffError::AxisOutOfRange {
                op: "max",
                axis,
                rank: av.rank(),
            });
        }
        let (outer, n, inner) = split_at_axis(av.shape(), axis);
        let src = av.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_val = src[o * n * inner + i];
                for j in 1..n {
                    let v = src[(o * n + j) * inner + i];
                    if v > best_val {
                        best = j;
                        best_val = v;
                    }
                }
                out[o * inner + i] = best_val;
                argmax[o * inner + i] = best;
            }
        }
        let shape = reduced_shape(av.shape(), axis);
        let rg = self.rg(a);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Max {
                input: a,
                axis,
                argmax,
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Euclidean norm of each row of a matrix, shape `[rows]`.
    ///
    /// The adjoint of a zero row is zero.
    pub fn row_norms(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        let (m, _) = require_matrix("row_norms", av)?;
        let out = (0..m)
            .map(|i| av.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::new(&[m], out)?, Op::RowNorms(a), rg)
    }

    /// Scales each row to unit norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        let (m, n) = require_matrix("normalize_rows", av)?;
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[m, n], out)?, Op::NormalizeRows(a), rg)
    }

    /// Gathers rows of a matrix (repeats allowed).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let av = self.value(a);
        let (m, n) = require_matrix("select_rows", av)?;
        if indices.is_empty() {
            return Err(DiffError::EmptyInput { op: "select_rows" });
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(DiffError::IndexOutOfRange {
                    op: "select_rows",
                    index: i,
                    bound: m,
                });
            }
            data.extend_from_slice(av.row(i));
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(&[indices.len(), n], data)?,
            Op::SelectRows {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Contiguous row range `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let idx: Vec<usize> = (start..end).collect();
        self.select_rows(a, &idx)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let av = self.value(a);
        let t = av.reshaped(shape).map_err(|_| DiffError::ShapeMismatch {
            op: "reshape",
            left: av.shape().to_vec(),
            right: shape.to_vec(),
        })?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Euclidean norm of a tensor viewed as one vector, shape `[1]`.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.value(a).numel();
        let row = self.reshape(a, &[1, n])?;
        self.row_norms(row)
    }

    /// Cosine similarity of two equal-length tensors, shape `[1]`.
    /// A zero vector has similarity 0 with everything.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() {
            return Err(shape_err("cosine", av, bv));
        }
        let n = av.numel();
        let ar = self.reshape(a, &[1, n])?;
        let br = self.reshape(b, &[1, n])?;
        let an = self.normalize_rows(ar)?;
        let bn = self.normalize_rows(br)?;
        let bt = self.transpose(bn)?;
        let dot = self.matmul(an, bt)?;
        self.reshape(dot, &[1])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = Vec::new();
        let per_node = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    let t = Tensor::new(self.nodes[i].value.shape(), data)
                        .expect("gradient shape matches value");
                    if let Op::Param(id) = self.nodes[i].op {
                        let mut pg = t.clone();
                        if let Some(fault) = self.fault.filter(|f| f.param == id) {
                            pg.data_mut().iter_mut().for_each(|v| *v *= fault.scale);
                        }
                        params.push((id, pg));
                    }
                    t
                })
            })
            .collect();
        Ok(Gradients { per_node, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(buf) = self.slot(grads, *a) {
                    gemm_bt_acc(g, bv.data(), buf, m, n, k);
                }
                if let Some(buf) = self.slot(grads, *b) {
                    gemm_at_acc(av.data(), g, buf, k, m, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                if let Some(buf) = self.slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(buf) = self.slot(grads, *a) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(buf) = self.slot(grads, *b) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                }
            }
            Op::Scale(a, factor) => {
                if let Some(buf) = self.slot(grads, *a) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += factor * s);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(buf) = self.slot(grads, *a) {
                    for ((d, s), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = out.shape()[1];
                if let Some(buf) = self.slot(grads, *a) {
                    for ((y, gr), d) in out
                        .data()
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(buf.chunks_exact_mut(n))
                    {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { probs, target } => {
                let p = self.value(*probs).data()[*target];
                if let Some(buf) = self.slot(grads, *probs) {
                    if p > LOG_CLAMP {
                        buf[*target] -= g[0] / p;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_at_axis(out.shape(), *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &v in inputs {
                        let chunk = self.value(v).shape()[*axis] * inner;
                        if let Some(buf) = self.slot(grads, v) {
                            let dst = &mut buf[o * chunk..(o + 1) * chunk];
                            dst.iter_mut()
                                .zip(&g[offset..offset + chunk])
                                .for_each(|(d, s)| *d += s);
                        }
                        offset += chunk;
                    }
                }
            }
            Op::Mean { input, axis } => {
                let (outer, n, inner) = split_at_axis(self.value(*input).shape(), *axis);
                let inv = 1.0 / n as f64;
                if let Some(buf) = self.slot(grads, *input) {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for i in 0..inner {
                                buf[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::Max {
                input,
                axis,
                argmax,
            } => {
                let (outer, n, inner) = split_at_axis(self.value(*input).shape(), *axis);
                if let Some(buf) = self.slot(grads, *input) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = argmax[o * inner + i];
                            buf[(o * n + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(buf) = self.slot(grads, *a) {
                    buf.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::RowNorms(a) => {
                let x = self.value(*a);
                let n = x.shape()[1];
                if let Some(buf) = self.slot(grads, *a) {
                    for (i, (row, d)) in x
                        .data()
                        .chunks_exact(n)
                        .zip(buf.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let norm = out.data()[i];
                        if norm > 0.0 {
                            let s = g[i] / norm;
                            d.iter_mut().zip(row).for_each(|(d, x)| *d += s * x);
                        }
                    }
                }
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let n = x.shape()[1];
                if let Some(buf) = self.slot(grads, *a) {
                    for ((row, (y, gr)), d) in x
                        .data()
                        .chunks_exact(n)
                        .zip(out.data().chunks_exact(n).zip(g.chunks_exact(n)))
                        .zip(buf.chunks_exact_mut(n))
                    {
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                d[j] += (gr[j] - y[j] * dot) / norm;
                            }
                        }
                    }
                }
            }
            Op::SelectRows { input, indices } => {
                let n = out.shape()[1];
                if let Some(buf) = self.slot(grads, *input) {
                    for (r, &i) in indices.iter().enumerate() {
                        buf[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(buf) = self.slot(grads, *a) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v`
    /// does not lead back to any differentiable leaf.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.rg(v) {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]).as_mut_slice())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Concat { .. } => "concat",
        Op::Mean { .. } => "mean",
        Op::Max { .. } => "max",
        Op::SumAll(_) => "sum_all",
        Op::RowNorms(_) => "row_norms",
        Op::NormalizeRows(_) => "normalize_rows",
        Op::SelectRows { .. } => "select_rows",
        Op::Reshape(_) => "reshape",
    }
}

//! Reverse-mode tape over dense tensors.
//!
//! Every operation appends a node holding its forward value and the indices of
//! its parents. Parents always precede children, so a single reverse sweep over
//! the node list is a valid topological order for backpropagation.

use std::sync::Arc;

use super::{AutodiffError, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations. Parameterised variants carry their constants.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Elementwise sum of equal shapes.
    Add,
    Sub,
    /// Elementwise product; one operand may be a single-element scalar.
    Mul,
    /// `[m, k] x [k, n]`.
    MatMul,
    Relu,
    /// `x σ(x)`.
    Silu,
    /// Elementwise `x^{-1/2}`.
    Rsqrt,
    /// Row-wise normalisation over the last axis with learnable gain and bias
    /// (inputs: `x [m, n]`, `gain [n]`, `bias [n]`).
    LayerNorm,
    /// Sum of all entries, producing a scalar.
    Sum,
    /// Sum of squared entries, producing a scalar.
    SquaredNorm,
    /// Multiplication by a constant.
    Scale(f64),
    /// Column-wise concatenation of matrices with equal row counts.
    Concat,
    /// Mean of all entries, producing a scalar.
    Mean,
    /// Adds a length-`n` row to every row of an `[m, n]` matrix.
    AddRow,
    /// Selects rows by index.
    GatherRows(Arc<[usize]>),
    /// Sums row `e` of the input into output row `index[e]`.
    ScatterAddRows { index: Arc<[usize]>, rows: usize },
    /// Scales row `i` of `[m, n]` by entry `i` of an `[m, 1]` column.
    MulRows,
    /// Per-row squared Euclidean norm, `[m, n] -> [m, 1]`.
    RowSquaredNorm,
    /// Per-row Euclidean norm, `[m, n] -> [m, 1]`. Gradient at zero rows is zero.
    RowNorm,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Relu => "relu",
            OpKind::Silu => "silu",
            OpKind::Rsqrt => "rsqrt",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Sum => "sum",
            OpKind::SquaredNorm => "squared_norm",
            OpKind::Scale(_) => "scale",
            OpKind::Concat => "concat",
            OpKind::Mean => "mean",
            OpKind::AddRow => "add_row",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::ScatterAddRows { .. } => "scatter_add_rows",
            OpKind::MulRows => "mul_rows",
            OpKind::RowSquaredNorm => "row_squared_norm",
            OpKind::RowNorm => "row_norm",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Concat => None,
            OpKind::LayerNorm => Some(3),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::AddRow => Some(2),
            OpKind::MulRows => Some(2),
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    /// Normalised rows and per-row inverse standard deviation.
    LayerNorm { normalized: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Option<OpKind>,
    parents: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    saved: Saved,
}

/// Append-only computation record.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zero when `var` does not
    /// reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn mismatch(op: &OpKind, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: op.name(),
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn is_scalar_shape(shape: &[usize]) -> bool {
    shape.iter().product::<usize>() == 1 && shape.len() <= 1
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where the
/// transposes are expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Stored shapes: a is [m,k] (or [k,m] when transposed), b is [k,n] (or [n,k]).
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(None, Vec::new(), value, true, Saved::None)
    }

    /// Records an input that never needs a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(None, Vec::new(), value, false, Saved::None)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Parents of a node; always lower indices than the node itself.
    pub fn parents(&self, var: Var) -> &[Var] {
        &self.nodes[var.0].parents
    }

    fn push(
        &mut self,
        op: Option<OpKind>,
        parents: Vec<Var>,
        value: Tensor,
        requires_grad: bool,
        saved: Saved,
    ) -> Var {
        let id = self.nodes.len();
        debug_assert!(parents.iter().all(|p| p.0 < id));
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
            saved,
        });
        Var(id)
    }

    /// Evaluates `op` on `inputs`, records the result and returns its handle.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if let Some(arity) = op.arity() {
            if inputs.len() != arity {
                return Err(AutodiffError::Arity {
                    op: op.name(),
                    expected: arity,
                    got: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected: 1,
                got: 0,
            });
        }
        let (value, saved) = self.evaluate(&op, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Some(op), inputs.to_vec(), value, requires_grad, saved))
    }

    fn evaluate(&self, op: &OpKind, inputs: &[Var]) -> Result<(Tensor, Saved), AutodiffError> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let out = match op {
            OpKind::Add | OpKind::Sub => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(mismatch(op, a.shape(), b.shape()));
                }
                let sign = if matches!(op, OpKind::Add) { 1.0 } else { -1.0 };
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| x + sign * y)
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                    Tensor::from_parts(a.shape().to_vec(), data)
                } else if is_scalar_shape(a.shape()) {
                    let s = a.data()[0];
                    Tensor::from_parts(b.shape().to_vec(), b.data().iter().map(|y| s * y).collect())
                } else if is_scalar_shape(b.shape()) {
                    let s = b.data()[0];
                    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| s * x).collect())
                } else {
                    return Err(mismatch(op, a.shape(), b.shape()));
                }
            }
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k) = as_matrix(a.shape()).ok_or_else(|| mismatch(op, a.shape(), b.shape()))?;
                let (k2, n) = as_matrix(b.shape()).ok_or_else(|| mismatch(op, a.shape(), b.shape()))?;
                if k != k2 {
                    return Err(mismatch(op, a.shape(), b.shape()));
                }
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
                Tensor::from_parts(vec![m, n], c)
            }
            OpKind::Relu => {
                let a = val(0);
                Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x.max(0.0)).collect())
            }
            OpKind::Silu => {
                let a = val(0);
                Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x * sigmoid(*x)).collect())
            }
            OpKind::Rsqrt => {
                let a = val(0);
                Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| 1.0 / x.sqrt()).collect())
            }
            OpKind::LayerNorm => {
                let (x, gain, bias) = (val(0), val(1), val(2));
                let (m, n) = as_matrix(x.shape()).ok_or_else(|| mismatch(op, x.shape(), gain.shape()))?;
                if gain.len() != n || gain.shape().len() != 1 {
                    return Err(mismatch(op, x.shape(), gain.shape()));
                }
                if bias.len() != n || bias.shape().len() != 1 {
                    return Err(mismatch(op, x.shape(), bias.shape()));
                }
                let mut normalized = vec![0.0; m * n];
                let mut inv_std = vec![0.0; m];
                let mut out = vec![0.0; m * n];
                let (g, b) = (gain.data(), bias.data());
                for r in 0..m {
                    let row = &x.data()[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    inv_std[r] = is;
                    for c in 0..n {
                        let xh = (row[c] - mean) * is;
                        normalized[r * n + c] = xh;
                        out[r * n + c] = xh * g[c] + b[c];
                    }
                }
                return Ok((
                    Tensor::from_parts(vec![m, n], out),
                    Saved::LayerNorm { normalized, inv_std },
                ));
            }
            OpKind::Sum => Tensor::scalar(val(0).data().iter().sum()),
            OpKind::Mean => {
                let a = val(0);
                if a.is_empty() {
                    return Err(AutodiffError::Empty { op: op.name() });
                }
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            OpKind::SquaredNorm => Tensor::scalar(val(0).squared_norm()),
            OpKind::Scale(s) => {
                let a = val(0);
                Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| s * x).collect())
            }
            OpKind::Concat => {
                let first = val(0);
                let (m, _) = as_matrix(first.shape()).ok_or_else(|| mismatch(op, first.shape(), &[]))?;
                let mut widths = Vec::with_capacity(inputs.len());
                for i in 0..inputs.len() {
                    let t = val(i);
                    match as_matrix(t.shape()) {
                        Some((mi, ni)) if mi == m => widths.push(ni),
                        _ => return Err(mismatch(op, first.shape(), t.shape())),
                    }
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(m * total);
                for r in 0..m {
                    for (i, w) in widths.iter().enumerate() {
                        data.extend_from_slice(&val(i).data()[r * w..(r + 1) * w]);
                    }
                }
                Tensor::from_parts(vec![m, total], data)
            }
            OpKind::AddRow => {
                let (x, b) = (val(0), val(1));
                let (m, n) = as_matrix(x.shape()).ok_or_else(|| mismatch(op, x.shape(), b.shape()))?;
                if b.len() != n || b.shape().len() > 2 || (b.shape().len() == 2 && b.shape()[0] != 1) {
                    return Err(mismatch(op, x.shape(), b.shape()));
                }
                let mut data = x.data().to_vec();
                for r in 0..m {
                    for (o, bv) in data[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Tensor::from_parts(vec![m, n], data)
            }
            OpKind::GatherRows(index) => {
                let x = val(0);
                let (m, n) = as_matrix(x.shape()).ok_or_else(|| mismatch(op, x.shape(), &[index.len()]))?;
                let mut data = Vec::with_capacity(index.len() * n);
                for &i in index.iter() {
                    if i >= m {
                        return Err(AutodiffError::IndexOutOfRange { op: op.name(), index: i, len: m });
                    }
                    data.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
                }
                Tensor::from_parts(vec![index.len(), n], data)
            }
            OpKind::ScatterAddRows { index, rows } => {
                let x = val(0);
                let (e, n) = as_matrix(x.shape()).ok_or_else(|| mismatch(op, x.shape(), &[index.len()]))?;
                if e != index.len() {
                    return Err(mismatch(op, x.shape(), &[index.len()]));
                }
                let mut data = vec![0.0; rows * n];
                for (r, &dst) in index.iter().enumerate() {
                    if dst >= *rows {
                        return Err(AutodiffError::IndexOutOfRange { op: op.name(), index: dst, len: *rows });
                    }
                    let src = &x.data()[r * n..(r + 1) * n];
                    for (o, s) in data[dst * n..(dst + 1) * n].iter_mut().zip(src) {
                        *o += s;
                    }
                }
                Tensor::from_parts(vec![*rows, n], data)
            }
            OpKind::MulRows => {
                let (x, s) = (val(0), val(1));
                let (m, n) = as_matrix(x.shape()).ok_or_else(|| mismatch(op, x.shape(), s.shape()))?;
                let column_ok = match s.shape() {
                    [len] => *len == m,
                    [len, 1] => *len == m,
                    _ => false,
                };
                if !column_ok {
                    return Err(mismatch(op, x.shape(), s.shape()));
                }
                let mut data = x.data().to_vec();
                for (r, sv) in s.data().iter().enumerate() {
                    for o in &mut data[r * n..(r + 1) * n] {
                        *o *= sv;
                    }
                }
                Tensor::from_parts(vec![m, n], data)
            }
            OpKind::RowSquaredNorm | OpKind::RowNorm => {
                let x = val(0);
                let (m, n) = as_matrix(x.shape()).ok_or_else(|| mismatch(op, x.shape(), &[]))?;
                let sqrt = matches!(op, OpKind::RowNorm);
                let data = (0..m)
                    .map(|r| {
                        let s: f64 = x.data()[r * n..(r + 1) * n].iter().map(|v| v * v).sum();
                        if sqrt {
                            s.sqrt()
                        } else {
                            s
                        }
                    })
                    .collect();
                Tensor::from_parts(vec![m, 1], data)
            }
        };
        Ok((out, Saved::None))
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let loss_shape = self.nodes[loss.0].value.shape();
        if !is_scalar_shape(loss_shape) {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(op) = &node.op {
                if node.requires_grad {
                    self.propagate(op, node, &g, &mut grads);
                }
            }
            grads[id] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, op: &OpKind, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let parents = &node.parents;
        let needs = |i: usize| self.nodes[parents[i].0].requires_grad;
        let pval = |i: usize| &self.nodes[parents[i].0].value;

        let accumulate = |grads: &mut [Option<Vec<f64>>], i: usize, contrib: Vec<f64>| {
            let slot = &mut grads[parents[i].0];
            match slot {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                None => *slot = Some(contrib),
            }
        };

        match op {
            OpKind::Add | OpKind::Sub => {
                if needs(0) {
                    accumulate(grads, 0, g.to_vec());
                }
                if needs(1) {
                    let sign = if matches!(op, OpKind::Add) { 1.0 } else { -1.0 };
                    accumulate(grads, 1, g.iter().map(|x| sign * x).collect());
                }
            }
            OpKind::Mul => {
                let (a, b) = (pval(0), pval(1));
                if a.shape() == b.shape() {
                    if needs(0) {
                        accumulate(grads, 0, g.iter().zip(b.data()).map(|(x, y)| x * y).collect());
                    }
                    if needs(1) {
                        accumulate(grads, 1, g.iter().zip(a.data()).map(|(x, y)| x * y).collect());
                    }
                } else {
                    // One side is a broadcast scalar.
                    let (scalar_idx, tensor_idx) = if is_scalar_shape(a.shape()) { (0, 1) } else { (1, 0) };
                    let s = pval(scalar_idx).data()[0];
                    let t = pval(tensor_idx);
                    if needs(tensor_idx) {
                        accumulate(grads, tensor_idx, g.iter().map(|x| s * x).collect());
                    }
                    if needs(scalar_idx) {
                        let dot = g.iter().zip(t.data()).map(|(x, y)| x * y).sum();
                        accumulate(grads, scalar_idx, vec![dot]);
                    }
                }
            }
            OpKind::MatMul => {
                let (a, b) = (pval(0), pval(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if needs(0) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, b.data(), true, &mut da, 0.0);
                    accumulate(grads, 0, da);
                }
                if needs(1) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g, false, &mut db, 0.0);
                    accumulate(grads, 1, db);
                }
            }
            OpKind::Relu => {
                if needs(0) {
                    let contrib = g
                        .iter()
                        .zip(pval(0).data())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(grads, 0, contrib);
                }
            }
            OpKind::Silu => {
                if needs(0) {
                    let contrib = g
                        .iter()
                        .zip(pval(0).data())
                        .map(|(gv, x)| {
                            let s = sigmoid(*x);
                            gv * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(grads, 0, contrib);
                }
            }
            OpKind::Rsqrt => {
                if needs(0) {
                    let contrib = g.iter().zip(node.value.data()).map(|(gv, y)| -0.5 * gv * y * y * y).collect();
                    accumulate(grads, 0, contrib);
                }
            }
            OpKind::LayerNorm => {
                let Saved::LayerNorm { normalized, inv_std } = &node.saved else {
                    unreachable!("layer_norm node without saved statistics")
                };
                let (m, n) = (pval(0).shape()[0], pval(0).shape()[1]);
                let gain = pval(1).data();
                if needs(0) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &normalized[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = gr[c] * gain[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            let d = gr[c] * gain[c];
                            dx[r * n + c] = inv_std[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(grads, 0, dx);
                }
                if needs(1) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * normalized[r * n + c];
                        }
                    }
                    accumulate(grads, 1, dg);
                }
                if needs(2) {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                    accumulate(grads, 2, db);
                }
            }
            OpKind::Sum => {
                if needs(0) {
                    accumulate(grads, 0, vec![g[0]; pval(0).len()]);
                }
            }
            OpKind::Mean => {
                if needs(0) {
                    let n = pval(0).len();
                    accumulate(grads, 0, vec![g[0] / n as f64; n]);
                }
            }
            OpKind::SquaredNorm => {
                if needs(0) {
                    accumulate(grads, 0, pval(0).data().iter().map(|x| 2.0 * x * g[0]).collect());
                }
            }
            OpKind::Scale(s) => {
                if needs(0) {
                    accumulate(grads, 0, g.iter().map(|x| s * x).collect());
                }
            }
            OpKind::Concat => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for i in 0..parents.len() {
                    let w = pval(i).shape()[1];
                    if needs(i) {
                        let mut contrib = Vec::with_capacity(m * w);
                        for r in 0..m {
                            contrib.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, i, contrib);
                    }
                    offset += w;
                }
            }
            OpKind::AddRow => {
                if needs(0) {
                    accumulate(grads, 0, g.to_vec());
                }
                if needs(1) {
                    let n = pval(1).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, 1, db);
                }
            }
            OpKind::GatherRows(index) => {
                if needs(0) {
                    let x = pval(0);
                    let n = x.shape()[1];
                    let mut dx = vec![0.0; x.len()];
                    for (r, &src) in index.iter().enumerate() {
                        for (d, v) in dx[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d += v;
                        }
                    }
                    accumulate(grads, 0, dx);
                }
            }
            OpKind::ScatterAddRows { index, .. } => {
                if needs(0) {
                    let n = pval(0).shape()[1];
                    let mut dx = Vec::with_capacity(index.len() * n);
                    for &dst in index.iter() {
                        dx.extend_from_slice(&g[dst * n..(dst + 1) * n]);
                    }
                    accumulate(grads, 0, dx);
                }
            }
            OpKind::MulRows => {
                let (x, s) = (pval(0), pval(1));
                let n = x.shape()[1];
                if needs(0) {
                    let mut dx = g.to_vec();
                    for (r, sv) in s.data().iter().enumerate() {
                        for d in &mut dx[r * n..(r + 1) * n] {
                            *d *= sv;
                        }
                    }
                    accumulate(grads, 0, dx);
                }
                if needs(1) {
                    let ds = (0..s.len())
                        .map(|r| {
                            g[r * n..(r + 1) * n]
                                .iter()
                                .zip(&x.data()[r * n..(r + 1) * n])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    accumulate(grads, 1, ds);
                }
            }
            OpKind::RowSquaredNorm => {
                if needs(0) {
                    let x = pval(0);
                    let n = x.shape()[1];
                    let mut dx = vec![0.0; x.len()];
                    for (r, gv) in g.iter().enumerate() {
                        for c in 0..n {
                            dx[r * n + c] = 2.0 * x.data()[r * n + c] * gv;
                        }
                    }
                    accumulate(grads, 0, dx);
                }
            }
            OpKind::RowNorm => {
                if needs(0) {
                    let x = pval(0);
                    let n = x.shape()[1];
                    let norms = node.value.data();
                    let mut dx = vec![0.0; x.len()];
                    for (r, gv) in g.iter().enumerate() {
                        if norms[r] > 0.0 {
                            for c in 0..n {
                                dx[r * n + c] = x.data()[r * n + c] / norms[r] * gv;
                            }
                        }
                    }
                    accumulate(grads, 0, dx);
                }
            }
        }
    }

    // Convenience wrappers.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Silu, &[a])
    }

    pub fn rsqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Rsqrt, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::LayerNorm, &[x, gain, bias])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn squared_norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::SquaredNorm, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Scale(s), &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Concat, parts)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::AddRow, &[x, row])
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var, AutodiffError> {
        self.apply(OpKind::GatherRows(index), &[x])
    }

    pub fn scatter_add_rows(&mut self, x: Var, index: Arc<[usize]>, rows: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::ScatterAddRows { index, rows }, &[x])
    }

    pub fn mul_rows(&mut self, x: Var, column: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::MulRows, &[x, column])
    }

    pub fn row_squared_norm(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::RowSquaredNorm, &[x])
    }

    pub fn row_norm(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::RowNorm, &[x])
    }

    /// Mean squared difference between two equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, AutodiffError> {
        if self.shape(pred) != self.shape(target) {
            return Err(AutodiffError::ShapeMismatch {
                op: "mse_loss",
                left: self.shape(pred).to_vec(),
                right: self.shape(target).to_vec(),
            });
        }
        let n = self.value(pred).len();
        if n == 0 {
            return Err(AutodiffError::Empty { op: "mse_loss" });
        }
        let diff = self.sub(pred, target)?;
        let sq = self.squared_norm(diff)?;
        self.scale(sq, 1.0 / n as f64)
    }
}

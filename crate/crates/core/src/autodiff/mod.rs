//! Tape-based reverse-mode differentiation with support for differentiating
//! through gradients (double backprop).
//!
//! Every backward rule is expressed in terms of operations that are
//! themselves recorded on the tape, so a gradient produced with
//! `create_graph = true` is an ordinary [`Var`] that can be differentiated
//! again. A tape is confined to the thread that builds it; the [`Tensor`]
//! values read out of it are plain data.

mod tensor;

use std::rc::Rc;

use thiserror::Error;

pub use tensor::Tensor;

/// Smoothing constant inside [`Tape::sqrt_eps`].
pub const SQRT_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid operand shape {shape:?}")]
    InvalidShape { op: &'static str, shape: Vec<usize> },
    #[error("grad: output must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("grad: variable {0} is not a differentiable leaf")]
    NotALeaf(usize),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * a + shift`
    Affine(Var, f64),
    /// tensor times a scalar-shaped var
    MulScalar(Var, Var),
    Recip(Var),
    MatMul(Var, Var),
    Transpose(Var),
    /// `[n, m] + [m]` broadcast over rows
    AddBias(Var, Var),
    /// `[n, m] -> [m]`
    SumRows(Var),
    /// `[m] -> [n, m]`
    BroadcastRows(Var),
    /// `[n, m] -> [n]`
    RowSum(Var),
    /// `[n] -> [n, m]`
    BroadcastCols(Var),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    /// scalar broadcast to the node's shape
    Expand(Var),
    Dot(Var, Var),
    L2Norm(Var),
    SqrtEps(Var),
    Softmax(Var),
    LogSoftmaxNll(Var, Rc<[usize]>),
    Slice(Var, usize),
    Pad(Var, usize),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations. Operands always precede the node that
/// consumes them, so the node list is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    peak_bytes: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes of tensor storage currently held by the tape.
    pub fn live_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * 8).sum()
    }

    /// Largest [`Tape::live_bytes`] observed since creation.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes.max(self.live_bytes())
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownVar(v.0))
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, operands: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let requires_grad = operands.iter().any(|o| self.nodes[o.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        self.check(a)?;
        match *self.shape(a) {
            [n, m] => Ok((n, m)),
            ref s => Err(AutodiffError::InvalidShape { op, shape: s.to_vec() }),
        }
    }

    fn expect_scalar(&self, op: &'static str, s: Var) -> Result<()> {
        self.check(s)?;
        if self.value(s).is_scalar() {
            Ok(())
        } else {
            Err(AutodiffError::InvalidShape { op, shape: self.shape(s).to_vec() })
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| f(p)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |p, q| p + q);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |p, q| p - q);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |p, q| p * q);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.map(a, |p| scale * p + shift);
        self.push("affine", v, Op::Affine(a, scale), &[a])
    }

    /// Tensor `a` times scalar-shaped `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        self.expect_scalar("mul_scalar", s)?;
        let c = self.value(s).item();
        let v = self.map(a, |p| p * c);
        self.push("mul_scalar", v, Op::MulScalar(a, s), &[a, s])
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.map(a, |p| 1.0 / p);
        self.push("recip", v, Op::Recip(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.rank2("matmul", a)?;
        let (k2, m) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        let x = self.value(a).data();
        let y = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let xv = x[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                let yrow = &y[p * m..(p + 1) * m];
                for (o, &yv) in row.iter_mut().zip(yrow) {
                    *o += xv * yv;
                }
            }
        }
        self.push("matmul", Tensor::new(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.rank2("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = x[i * m + j];
            }
        }
        self.push("transpose", Tensor::new(vec![m, n], out), Op::Transpose(a), &[a])
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.rank2("add_bias", a)?;
        self.check(b)?;
        if self.shape(b) != [m] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![n, m],
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &p)| p + bias[idx % m])
            .collect();
        self.push("add_bias", Tensor::new(vec![n, m], data), Op::AddBias(a, b), &[a, b])
    }

    /// Column sums: `[n, m] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.rank2("sum_rows", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, &p) in out.iter_mut().zip(&x[i * m..(i + 1) * m]) {
                *o += p;
            }
        }
        self.push("sum_rows", Tensor::vector(out), Op::SumRows(a), &[a])
    }

    /// Repeats the vector `a` as `n` rows.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.check(a)?;
        let m = match *self.shape(a) {
            [m] => m,
            ref s => return Err(AutodiffError::InvalidShape { op: "broadcast_rows", shape: s.to_vec() }),
        };
        let row = self.value(a).data();
        let data = (0..n).flat_map(|_| row.iter().copied()).collect();
        self.push("broadcast_rows", Tensor::new(vec![n, m], data), Op::BroadcastRows(a), &[a])
    }

    /// Row sums: `[n, m] -> [n]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.rank2("row_sum", a)?;
        let x = self.value(a).data();
        let out = (0..n).map(|i| x[i * m..(i + 1) * m].iter().sum()).collect();
        self.push("row_sum", Tensor::vector(out), Op::RowSum(a), &[a])
    }

    /// Repeats each entry of the vector `a` across `m` columns.
    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Result<Var> {
        self.check(a)?;
        let n = match *self.shape(a) {
            [n] => n,
            ref s => return Err(AutodiffError::InvalidShape { op: "broadcast_cols", shape: s.to_vec() }),
        };
        let col = self.value(a).data();
        let data = col.iter().flat_map(|&c| std::iter::repeat_n(c, m)).collect();
        self.push("broadcast_cols", Tensor::new(vec![n, m], data), Op::BroadcastCols(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.map(a, |p| if p > 0.0 { p } else { 0.0 });
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.map(a, f64::tanh);
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a scalar to `shape`.
    pub fn expand(&mut self, s: Var, shape: Vec<usize>) -> Result<Var> {
        self.expect_scalar("expand", s)?;
        let v = Tensor::full(shape, self.value(s).item());
        self.push("expand", v, Op::Expand(s), &[s])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p * q)
            .sum();
        self.push("dot", Tensor::scalar(s), Op::Dot(a, b), &[a, b])
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().map(|p| p * p).sum::<f64>().sqrt();
        self.push("l2_norm", Tensor::scalar(s), Op::L2Norm(a), &[a])
    }

    /// Elementwise `sqrt(a + SQRT_EPS)`.
    pub fn sqrt_eps(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.map(a, |p| (p + SQRT_EPS).sqrt());
        self.push("sqrt_eps", v, Op::SqrtEps(a), &[a])
    }

    /// Row-wise softmax of a `[n, c]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.rank2("softmax", a)?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            out.extend(softmax_row(&x[i * c..(i + 1) * c]));
        }
        self.push("softmax", Tensor::new(vec![n, c], out), Op::Softmax(a), &[a])
    }

    /// Mean negative log-likelihood of `labels` under the row-wise softmax
    /// of `logits`.
    pub fn log_softmax_nll(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.rank2("log_softmax_nll", logits)?;
        if labels.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "log_softmax_nll",
                lhs: vec![n, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::LabelOutOfRange { op: "log_softmax_nll", label, classes: c });
        }
        let x = self.value(logits).data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = Tensor::scalar(total / n as f64);
        self.push("log_softmax_nll", v, Op::LogSoftmaxNll(logits, labels.into()), &[logits])
    }

    /// Contiguous flat range `[start, start + len)` as a 1-d tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let total = self.value(a).len();
        if start + len > total {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, len],
            });
        }
        let v = Tensor::vector(self.value(a).data()[start..start + len].to_vec());
        self.push("slice", v, Op::Slice(a, start), &[a])
    }

    /// Embeds the flat vector `a` at `start` in a zero vector of length `total`.
    pub fn pad(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        self.check(a)?;
        let len = self.value(a).len();
        if start + len > total {
            return Err(AutodiffError::ShapeMismatch {
                op: "pad",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, total],
            });
        }
        let mut out = vec![0.0; total];
        out[start..start + len].copy_from_slice(self.value(a).data());
        self.push("pad", Tensor::vector(out), Op::Pad(a, start), &[a])
    }

    /// `out[k] = a.flat[idx[k]]`.
    pub fn gather(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                lhs: self.shape(a).to_vec(),
                rhs: vec![bad],
            });
        }
        let v = Tensor::vector(idx.iter().map(|&i| x[i]).collect());
        self.push("gather", v, Op::Gather(a, idx), &[a])
    }

    /// Adjoint of [`Tape::gather`]: `out[idx[k]] += a[k]` into `len` zeros.
    pub fn scatter_add(&mut self, a: Var, idx: Rc<[usize]>, len: usize) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a).data();
        if x.len() != idx.len() || idx.iter().any(|&i| i >= len) {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add",
                lhs: self.shape(a).to_vec(),
                rhs: vec![idx.len(), len],
            });
        }
        let mut out = vec![0.0; len];
        for (&i, &p) in idx.iter().zip(x) {
            out[i] += p;
        }
        self.push("scatter_add", Tensor::vector(out), Op::ScatterAdd(a, idx), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let v = self.value(a).clone().reshaped(shape);
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Gradients of the scalar `output` with respect to each of `leaves`.
    ///
    /// With `create_graph` the returned vars are recorded nodes that depend
    /// on the inputs and can be differentiated again. Without it the
    /// intermediate backward nodes are discarded and the gradients come back
    /// as constants.
    pub fn grad(&mut self, output: Var, leaves: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        self.check(output)?;
        if !self.value(output).is_scalar() {
            return Err(AutodiffError::NotScalar(self.shape(output).to_vec()));
        }
        for &leaf in leaves {
            self.check(leaf)?;
            if !matches!(self.nodes[leaf.0].op, Op::Leaf) {
                return Err(AutodiffError::NotALeaf(leaf.0));
            }
        }

        let mark = self.nodes.len();
        let result = self.backward(output, leaves);
        self.peak_bytes = self.peak_bytes.max(self.live_bytes());
        let grads = match result {
            Ok(g) => g,
            Err(e) => {
                self.nodes.truncate(mark);
                return Err(e);
            }
        };
        if create_graph {
            return Ok(grads);
        }
        let values: Vec<Tensor> = grads.iter().map(|&g| self.value(g).clone()).collect();
        self.nodes.truncate(mark);
        Ok(values.into_iter().map(|v| self.constant(v)).collect())
    }

    /// Convenience wrapper returning gradient values without extending the tape.
    pub fn grad_values(&mut self, output: Var, leaves: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.nodes.len();
        let vars = self.grad(output, leaves, false)?;
        let values = vars.iter().map(|&g| self.value(g).clone()).collect();
        self.nodes.truncate(mark);
        Ok(values)
    }

    fn backward(&mut self, output: Var, leaves: &[Var]) -> Result<Vec<Var>> {
        let end = output.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; end];
        let seed = self.constant(Tensor::scalar(1.0));
        adj[output.0] = Some(seed);

        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let node = Var(i);
            let contributions = self.vjp(node, &op, g)?;
            for (operand, contrib) in contributions {
                if !self.nodes[operand.0].requires_grad {
                    continue;
                }
                adj[operand.0] = Some(match adj[operand.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        leaves
            .iter()
            .map(|&leaf| match adj.get(leaf.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(leaf).to_vec();
                    Ok(self.constant(Tensor::zeros(shape)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian product of one node, recorded as tape operations.
    fn vjp(&mut self, node: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        let needs = |t: &Tape, v: Var| t.nodes[v.0].requires_grad;
        let out = match *op {
            Op::Leaf | Op::Const => Vec::new(),
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => {
                let mut v = vec![(a, g)];
                if needs(self, b) {
                    v.push((b, self.scale(g, -1.0)?));
                }
                v
            }
            Op::Mul(a, b) => {
                let mut v = Vec::new();
                if needs(self, a) {
                    v.push((a, self.mul(g, b)?));
                }
                if needs(self, b) {
                    v.push((b, self.mul(g, a)?));
                }
                v
            }
            Op::Affine(a, scale) => vec![(a, self.scale(g, scale)?)],
            Op::MulScalar(a, s) => {
                let mut v = Vec::new();
                if needs(self, a) {
                    v.push((a, self.mul_scalar(g, s)?));
                }
                if needs(self, s) {
                    v.push((s, self.dot(g, a)?));
                }
                v
            }
            Op::Recip(a) => {
                let sq = self.mul(node, node)?;
                let neg = self.scale(sq, -1.0)?;
                vec![(a, self.mul(g, neg)?)]
            }
            Op::MatMul(a, b) => {
                let mut v = Vec::new();
                if needs(self, a) {
                    let bt = self.transpose(b)?;
                    v.push((a, self.matmul(g, bt)?));
                }
                if needs(self, b) {
                    let at = self.transpose(a)?;
                    v.push((b, self.matmul(at, g)?));
                }
                v
            }
            Op::Transpose(a) => vec![(a, self.transpose(g)?)],
            Op::AddBias(a, b) => {
                let mut v = vec![(a, g)];
                if needs(self, b) {
                    v.push((b, self.sum_rows(g)?));
                }
                v
            }
            Op::SumRows(a) => {
                let n = self.shape(a)[0];
                vec![(a, self.broadcast_rows(g, n)?)]
            }
            Op::BroadcastRows(a) => vec![(a, self.sum_rows(g)?)],
            Op::RowSum(a) => {
                let m = self.shape(a)[1];
                vec![(a, self.broadcast_cols(g, m)?)]
            }
            Op::BroadcastCols(a) => vec![(a, self.row_sum(g)?)],
            Op::Relu(a) => {
                let mask = self.map(a, |p| if p > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                vec![(a, self.mul(g, mask)?)]
            }
            Op::Tanh(a) => {
                let sq = self.mul(node, node)?;
                let deriv = self.affine(sq, -1.0, 1.0)?;
                vec![(a, self.mul(g, deriv)?)]
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.expand(g, shape)?)]
            }
            Op::Expand(s) => vec![(s, self.sum(g)?)],
            Op::Dot(a, b) => {
                let mut v = Vec::new();
                if needs(self, a) {
                    v.push((a, self.mul_scalar(b, g)?));
                }
                if needs(self, b) {
                    v.push((b, self.mul_scalar(a, g)?));
                }
                v
            }
            Op::L2Norm(a) => {
                let inv = self.recip(node)?;
                let s = self.mul(g, inv)?;
                vec![(a, self.mul_scalar(a, s)?)]
            }
            Op::SqrtEps(a) => {
                let inv = self.recip(node)?;
                let half = self.scale(inv, 0.5)?;
                vec![(a, self.mul(g, half)?)]
            }
            Op::Softmax(a) => {
                let m = self.shape(a)[1];
                let gs = self.mul(g, node)?;
                let rs = self.row_sum(gs)?;
                let rb = self.broadcast_cols(rs, m)?;
                let centered = self.sub(g, rb)?;
                vec![(a, self.mul(node, centered)?)]
            }
            Op::LogSoftmaxNll(z, ref labels) => {
                let (n, c) = (self.shape(z)[0], self.shape(z)[1]);
                let mut onehot = Tensor::zeros(vec![n, c]);
                for (i, &y) in labels.iter().enumerate() {
                    onehot.data_mut()[i * c + y] = 1.0;
                }
                let onehot = self.constant(onehot);
                let probs = self.softmax(z)?;
                let diff = self.sub(probs, onehot)?;
                let gn = self.scale(g, 1.0 / n as f64)?;
                vec![(z, self.mul_scalar(diff, gn)?)]
            }
            Op::Slice(a, start) => {
                let total = self.value(a).len();
                let padded = self.pad(g, start, total)?;
                let shape = self.shape(a).to_vec();
                vec![(a, self.reshape(padded, shape)?)]
            }
            Op::Pad(a, start) => {
                let len = self.value(a).len();
                let s = self.slice(g, start, len)?;
                let shape = self.shape(a).to_vec();
                vec![(a, self.reshape(s, shape)?)]
            }
            Op::Gather(a, ref idx) => {
                let len = self.value(a).len();
                let s = self.scatter_add(g, idx.clone(), len)?;
                let shape = self.shape(a).to_vec();
                vec![(a, self.reshape(s, shape)?)]
            }
            Op::ScatterAdd(a, ref idx) => {
                let flat = self.reshape(g, vec![self.value(g).len()])?;
                vec![(a, self.gather(flat, idx.clone())?)]
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.reshape(g, shape)?)]
            }
        };
        Ok(out)
    }
}

fn softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
    row.iter().map(move |z| (z - max).exp() / denom)
}

/// Hessian-vector product `∇²f(w)·v` by differentiating `⟨∇f(w), v⟩`.
///
/// `f` records a scalar function of the leaf it is handed.
pub fn hvp<F>(f: F, w: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if w.len() != v.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "hvp",
            lhs: vec![w.len()],
            rhs: vec![v.len()],
        });
    }
    let mut tape = Tape::new();
    let wv = tape.leaf(Tensor::vector(w.to_vec()));
    let fx = f(&mut tape, wv)?;
    let g = tape.grad(fx, &[wv], true)?[0];
    let dir = tape.constant(Tensor::vector(v.to_vec()));
    let gv = tape.dot(g, dir)?;
    let hv = tape.grad_values(gv, &[wv])?;
    Ok(hv.into_iter().next().map(Tensor::into_data).unwrap_or_default())
}

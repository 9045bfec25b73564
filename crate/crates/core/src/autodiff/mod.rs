//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node whose inputs
//! already exist, so node order is a topological order and [`Graph::backward`]
//! is a single reverse sweep. Graphs are built fresh for every forward pass.
//!
//! ```
//! use safe_fusion::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod gradcheck;
mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor shape must be non-empty positive integers, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `rows.len() × width` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::contract("ragged rows"));
        }
        Tensor::new(vec![rows.len(), width], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension of a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Trailing dimension of a matrix.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Nonlinearity used inside MLP sub-blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// Deliberately wrong backward rules, used as negative controls for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Softmax passes the upstream gradient through unchanged.
    SoftmaxBackward,
    /// Elementwise product drops the contribution to its right operand.
    MulBackward,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Saves `tanh(c (x + a x³))` for the backward pass.
    Gelu(Var, Vec<f64>),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        }),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + GELU_A * x * x * x)).tanh()
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph whose backward pass contains the given bug.
    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Outputs of every softmax node, i.e. every attention-weight matrix.
    pub fn softmax_outputs(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Softmax(_)))
            .map(|n| &n.value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(ta, "matmul")?;
        let (k2, n) = matrix_dims(tb, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(&ta.data, &tb.data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(ta, "matmul_nt")?;
        let (n, k2) = matrix_dims(tb, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(&ta.data, &tb.data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims(ta, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    /// Adds a `[n]` or `[1×n]` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, n) = matrix_dims(ta, "add_row")?;
        if tr.numel() != n || tr.rows() != 1 {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut data = ta.data.clone();
        for chunk in data.chunks_exact_mut(n) {
            for (x, b) in chunk.iter_mut().zip(&tr.data) {
                *x += b;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Scale(a, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let tanh: Vec<f64> = ta.data.iter().map(|&x| gelu_tanh(x)).collect();
        let data = ta.data.iter().zip(&tanh).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        let saved = if rg { tanh } else { Vec::new() };
        self.push(Tensor { shape, data }, Op::Gelu(a, saved), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Relu(a), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Gelu => self.gelu(a),
            Activation::Relu => self.relu(a),
        }
    }

    /// Per-row normalization to zero mean / unit variance followed by an
    /// affine `gain`, `bias` (both of width `n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims(tx, "layer_norm")?;
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.numel() != n {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data[i * n..(i + 1) * n];
            // Shifted mean: exact for constant rows.
            let pivot = row[0];
            let mean = pivot + row.iter().map(|v| v - pivot).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_finite() {
            return Err(Error::Numeric("softmax_rows"));
        }
        let n = tx.cols();
        let mut out = tx.data.clone();
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
        let shape = tx.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(x), rg))
    }

    /// `softmax(q·kᵀ / √width) · v`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let width = self.value(k).cols();
        if self.value(k).rows() != self.value(v).rows() {
            return Err(shape_err("scaled_dot_attention", self.value(k), self.value(v)));
        }
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, 1.0 / (width as f64).sqrt());
        let weights = self.softmax_rows(scaled)?;
        self.matmul(weights, v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let n = matrix_dims(self.value(*first), "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix_dims(t, "concat_rows")?;
            if c != n {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += r;
            data.extend_from_slice(&t.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor { shape: vec![rows, n], data },
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::contract(format!(
                "slice_rows [{start}, {}) out of range for {m} rows",
                start + len
            )));
        }
        let data = t.data[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape: vec![len, n], data },
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Inverse of [`Graph::concat_rows`] for two parts.
    pub fn split_rows(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let m = self.value(x).rows();
        if at == 0 || at >= m {
            return Err(Error::contract(format!("split_rows at {at} of {m} rows")));
        }
        Ok((self.slice_rows(x, 0, at)?, self.slice_rows(x, at, m - at)?))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let m = matrix_dims(self.value(*first), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix_dims(t, "concat_cols")?;
            if r != m {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor { shape: vec![m, n], data },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::contract(format!(
                "slice_cols [{start}, {}) out of range for {n} cols",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.data[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape: vec![m, len], data },
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Column means of an `m×n` matrix as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t, "mean_rows")?;
        let mut out = vec![0.0; n];
        for row in t.data.chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![1, n], data: out }, Op::MeanRows(x), rg))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let data = t.data.clone();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Row lookup (embedding table indexing).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (m, n) = matrix_dims(t, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::contract(format!("row id {id} out of range for {m} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor { shape: vec![ids.len(), n], data },
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `-log softmax(logits)[target]` in log-sum-exp form; result has shape `[1]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        let l = t.numel();
        if target >= l {
            return Err(Error::contract(format!(
                "target class {target} out of range for {l} logits"
            )));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("cross_entropy"));
        }
        let max = t.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = max + total.ln() - t.data[target];
        let probs = exps.iter().map(|e| e / total).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Propagates `d loss / d node` to every leaf that requires a gradient.
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape != [1] {
            return Err(Error::contract(format!(
                "backward needs a scalar loss of shape [1], got {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        let nodes = &self.nodes;
        let fault = self.fault;

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (ta.shape[0], ta.shape[1]);
                    let n = tb.shape[1];
                    acc(*a, &|d| kernels::gemm_nt(&g, &tb.data, d, m, n, k));
                    acc(*b, &|d| kernels::gemm_tn(&ta.data, &g, d, m, k, n));
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (ta.shape[0], ta.shape[1]);
                    let n = tb.shape[0];
                    acc(*a, &|d| kernels::gemm_nn(&g, &tb.data, d, m, n, k));
                    acc(*b, &|d| kernels::gemm_tn(&g, &ta.data, d, m, n, k));
                }
                Op::Transpose(a) => {
                    let (m, n) = (out.shape[1], out.shape[0]);
                    acc(*a, &|d| {
                        for i in 0..m {
                            for j in 0..n {
                                d[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &|d| kernels::axpy(1.0, &g, d));
                    acc(*b, &|d| kernels::axpy(1.0, &g, d));
                }
                Op::AddRow(a, row) => {
                    let n = out.cols();
                    acc(*a, &|d| kernels::axpy(1.0, &g, d));
                    acc(*row, &|d| {
                        for chunk in g.chunks_exact(n) {
                            kernels::axpy(1.0, chunk, d);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, &|d| {
                        for ((di, gi), bi) in d.iter_mut().zip(&g).zip(&tb.data) {
                            *di += gi * bi;
                        }
                    });
                    if fault != Some(Fault::MulBackward) {
                        acc(*b, &|d| {
                            for ((di, gi), ai) in d.iter_mut().zip(&g).zip(&ta.data) {
                                *di += gi * ai;
                            }
                        });
                    }
                }
                Op::Scale(a, c) => acc(*a, &|d| kernels::axpy(*c, &g, d)),
                Op::Gelu(a, tanh) => {
                    let ta = &nodes[a.0].value;
                    acc(*a, &|d| {
                        for (((di, gi), x), t) in d.iter_mut().zip(&g).zip(&ta.data).zip(tanh) {
                            *di += gi * gelu_grad(*x, *t);
                        }
                    });
                }
                Op::Relu(a) => {
                    let ta = &nodes[a.0].value;
                    acc(*a, &|d| {
                        for ((di, gi), x) in d.iter_mut().zip(&g).zip(&ta.data) {
                            if *x > 0.0 {
                                *di += gi;
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let n = out.cols();
                    let tg = &nodes[gain.0].value;
                    acc(*x, &|d| {
                        for (i, inv) in inv_std.iter().enumerate() {
                            let gr = &g[i * n..(i + 1) * n];
                            let hr = &xhat[i * n..(i + 1) * n];
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for j in 0..n {
                                let dh = gr[j] * tg.data[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hr[j];
                            }
                            let nf = n as f64;
                            for j in 0..n {
                                let dh = gr[j] * tg.data[j];
                                d[i * n + j] += inv / nf * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                    });
                    acc(*gain, &|d| {
                        for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                            for j in 0..n {
                                d[j] += gr[j] * hr[j];
                            }
                        }
                    });
                    acc(*bias, &|d| {
                        for gr in g.chunks_exact(n) {
                            kernels::axpy(1.0, gr, d);
                        }
                    });
                }
                Op::Softmax(a) => {
                    let n = out.cols();
                    if fault == Some(Fault::SoftmaxBackward) {
                        acc(*a, &|d| kernels::axpy(1.0, &g, d));
                    } else {
                        acc(*a, &|d| {
                            for ((dr, gr), sr) in d
                                .chunks_exact_mut(n)
                                .zip(g.chunks_exact(n))
                                .zip(out.data.chunks_exact(n))
                            {
                                let inner = kernels::dot(gr, sr);
                                for j in 0..n {
                                    dr[j] += sr[j] * (gr[j] - inner);
                                }
                            }
                        });
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.numel();
                        acc(*p, &|d| kernels::axpy(1.0, &g[offset..offset + len], d));
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = (out.shape[0], out.shape[1]);
                    let mut col = 0;
                    for p in parts {
                        let w = nodes[p.0].value.shape[1];
                        acc(*p, &|d| {
                            for i in 0..m {
                                kernels::axpy(
                                    1.0,
                                    &g[i * n + col..i * n + col + w],
                                    &mut d[i * w..(i + 1) * w],
                                );
                            }
                        });
                        col += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let n = out.cols();
                    acc(*x, &|d| kernels::axpy(1.0, &g, &mut d[start * n..start * n + g.len()]));
                }
                Op::SliceCols { x, start } => {
                    let (m, w) = (out.shape[0], out.shape[1]);
                    let n = nodes[x.0].value.shape[1];
                    acc(*x, &|d| {
                        for i in 0..m {
                            kernels::axpy(
                                1.0,
                                &g[i * w..(i + 1) * w],
                                &mut d[i * n + start..i * n + start + w],
                            );
                        }
                    });
                }
                Op::MeanRows(x) => {
                    let m = nodes[x.0].value.shape[0];
                    acc(*x, &|d| {
                        for chunk in d.chunks_exact_mut(g.len()) {
                            kernels::axpy(1.0 / m as f64, &g, chunk);
                        }
                    });
                }
                Op::Sum(x) => {
                    acc(*x, &|d| {
                        for di in d.iter_mut() {
                            *di += g[0];
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &|d| kernels::axpy(1.0, &g, d)),
                Op::GatherRows { table, ids } => {
                    let n = out.cols();
                    acc(*table, &|d| {
                        for (r, &id) in ids.iter().enumerate() {
                            kernels::axpy(1.0, &g[r * n..(r + 1) * n], &mut d[id * n..(id + 1) * n]);
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    acc(*logits, &|d| {
                        for (j, (di, p)) in d.iter_mut().zip(probs).enumerate() {
                            let onehot = if j == *target { 1.0 } else { 0.0 };
                            *di += g[0] * (p - onehot);
                        }
                    });
                }
            }
        }

        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(existing) => kernels::axpy(1.0, &g, &mut existing.data),
                None => {
                    node.grad = Some(Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    })
                }
            }
        }
        Ok(())
    }
}

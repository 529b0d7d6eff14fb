//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Operations are recorded in execution order on a [`Tape`]; each returns a
//! [`Var`] handle. [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients for every leaf created with [`Tape::leaf`] or
//! [`Tape::param`]. Intermediate gradients are discarded after each call, so
//! repeated calls accumulate leaf gradients exactly once per call.

use super::activation::{sigmoid, sigmoid_in_place, tanh, tanh_in_place};
use super::param::{ParamId, ParamStore};
use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    Mask(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    L2Norm(Var),
    Normalize(Var),
    Cosine(Var, Var),
    WeightedRowSum(Var, Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Diag(Var),
    LogSumExp(Var, bool),
    LstmCell {
        gates: Var,
        c_prev: Option<Var>,
        /// Activated gates `[i, f, g, o]` per row.
        acts: Vec<f64>,
        tanh_c: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | Cosine(a, b) | WeightedRowSum(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Sigmoid(a) | Tanh(a) | Relu(a) | LeakyRelu(a, _)
            | Softmax(a) | Mask(a, _) | SliceCols(a, _) | Gather(a, _) | Reshape(a)
            | L2Norm(a) | Normalize(a) | RowSum(a) | Sum(a) | Mean(a) | Diag(a)
            | LogSumExp(a, _) => vec![*a],
            ConcatCols(parts) | ConcatRows(parts) => parts.clone(),
            LstmCell { gates, c_prev, .. } => std::iter::once(*gates).chain(*c_prev).collect(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul(..) => "matmul",
            MatMulNt(..) => "matmul_nt",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            AddRow(..) => "add_row",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Sigmoid(..) => "sigmoid",
            Tanh(..) => "tanh",
            Relu(..) => "relu",
            LeakyRelu(..) => "leaky_relu",
            Softmax(..) => "softmax",
            Mask(..) => "mask_below_threshold",
            ConcatCols(..) => "concat_cols",
            ConcatRows(..) => "concat_rows",
            SliceCols(..) => "slice_cols",
            Gather(..) => "gather",
            Reshape(..) => "reshape",
            L2Norm(..) => "l2_norm",
            Normalize(..) => "normalize",
            Cosine(..) => "cosine_similarity",
            WeightedRowSum(..) => "weighted_row_sum",
            RowSum(..) => "row_sum",
            Sum(..) => "sum",
            Mean(..) => "mean",
            Diag(..) => "diag",
            LogSumExp(..) => "logsumexp",
            LstmCell { .. } => "lstm_cell",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(Var, ParamId)>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for a leaf by previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.leaf_grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.value(v).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    /// Records the current value of a stored parameter as a differentiable
    /// leaf; [`ParamStore::accumulate_grads`] later routes its gradient back.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let v = self.leaf(store.value(id).clone())?;
        self.bindings.push((v, id));
        Ok(v)
    }

    pub(crate) fn bindings(&self) -> &[(Var, ParamId)] {
        &self.bindings
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite input tensor".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat(&self, v: Var) -> MatRef<'_> {
        let t = self.value(v);
        MatRef::new(t.data(), t.rows(), t.cols())
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op)
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.mat(a), self.mat(b), &mut out);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.mat(a), self.mat(b).t(), &mut out);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(Error::Shape(format!(
                "add_row: {m}x{n} plus row of {}",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(x, y)| *x += y);
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Softmax(a))
    }

    /// Zeroes every entry `<= mu`; masked entries pass no gradient.
    pub fn mask_below_threshold(&mut self, a: Var, mu: f64) -> Result<Var> {
        if !mu.is_finite() {
            return Err(Error::Numeric(format!("threshold {mu} is not finite")));
        }
        self.map(a, Op::Mask(a, mu), |x| if x > mu { x } else { 0.0 })
    }

    /// Concatenates along the last axis; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat of nothing".into()));
        };
        let rows = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(Error::Shape("concat: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks along the first axis; all parts need the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat_rows of nothing".into()));
        };
        let cols = self.dims(first).1;
        if parts.iter().any(|&p| self.dims(p).1 != cols) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let rows = data.len() / cols;
        self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..start + width` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if width == 0 || start + width > n {
            return Err(Error::Shape(format!(
                "slice {start}..{} of {n} columns",
                start + width
            )));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..start + width]);
        }
        self.push(Tensor::matrix(m, width, data)?, Op::SliceCols(a, start))
    }

    /// Selects rows by index; the gradient scatter-adds back.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.is_empty() {
            return Err(Error::Shape("gather of no rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index(format!("row {bad} of {m}")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        self.push(Tensor::matrix(idx.len(), n, data)?, Op::Gather(a, idx.to_vec()))
    }

    /// Row lookup into an embedding table.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(a))
    }

    /// Euclidean norm of each row, as an `m×1` column.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows())
            .map(|r| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(Tensor::column_vector(data)?, Op::L2Norm(a))
    }

    /// Scales each row to unit length; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(t.cols()) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Normalize(a))
    }

    /// Row-wise cosine similarity as an `m×1` column; 0 when a row is zero.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = (0..ta.rows())
            .map(|r| cosine(ta.row(r), tb.row(r)))
            .collect();
        self.push(Tensor::column_vector(data)?, Op::Cosine(a, b))
    }

    /// `out[b] = Σ_j weights[b, j] · values[b·m + j]` for `weights: B×m`,
    /// `values: (B·m)×d`.
    pub fn weighted_row_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let ((b, m), (bm, d)) = (self.dims(weights), self.dims(values));
        if b * m != bm {
            return Err(Error::Shape(format!(
                "weighted_row_sum: {b}x{m} weights over {bm} value rows"
            )));
        }
        let (w, v) = (self.value(weights), self.value(values));
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            let dst = &mut out[i * d..(i + 1) * d];
            for j in 0..m {
                let wij = w.at(i, j);
                if wij != 0.0 {
                    dst.iter_mut()
                        .zip(v.row(i * m + j))
                        .for_each(|(o, x)| *o += wij * x);
                }
            }
        }
        self.push(Tensor::matrix(b, d, out)?, Op::WeightedRowSum(weights, values))
    }

    /// Sum of each row, as an `m×1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        self.push(Tensor::column_vector(data)?, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Diagonal of a square matrix, as an `n×1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m != n {
            return Err(Error::Shape(format!("diag of {m}x{n}")));
        }
        let t = self.value(a);
        let data = (0..n).map(|i| t.at(i, i)).collect();
        self.push(Tensor::column_vector(data)?, Op::Diag(a))
    }

    /// `log Σ_j exp(a[r, j])` per row; with `exclude_diag` the sum skips
    /// `j = r`.
    pub fn logsumexp_rows(&mut self, a: Var, exclude_diag: bool) -> Result<Var> {
        let (m, n) = self.dims(a);
        if exclude_diag && n < 2 {
            return Err(Error::Contract(
                "log-sum-exp without the diagonal needs at least two columns".into(),
            ));
        }
        let t = self.value(a);
        let data: Vec<f64> = (0..m)
            .map(|r| {
                let row = t.row(r);
                let keep = |j: usize| !(exclude_diag && j == r);
                let max = (0..n)
                    .filter(|&j| keep(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n)
                    .filter(|&j| keep(j))
                    .map(|j| (row[j] - max).exp())
                    .sum();
                max + s.ln()
            })
            .collect();
        self.push(Tensor::column_vector(data)?, Op::LogSumExp(a, exclude_diag))
    }

    /// One LSTM step from pre-activation gates `n×4h` laid out as
    /// `[input, forget, cell, output]` and the previous cell state `n×h`
    /// (zero when `None`). Returns `[h | c]` as an `n×2h` matrix.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Option<Var>) -> Result<Var> {
        let (n, w) = self.dims(gates);
        if w % 4 != 0 {
            return Err(Error::Shape(format!("lstm_cell: {w} gate columns")));
        }
        let h = w / 4;
        if let Some(c) = c_prev {
            if self.dims(c) != (n, h) {
                return Err(Error::Shape(format!("lstm_cell: state {:?} for {n}x{h}", self.dims(c))));
            }
        }
        let mut acts = self.value(gates).data().to_vec();
        let mut tanh_c = vec![0.0; n * h];
        let mut out = vec![0.0; n * 2 * h];
        for r in 0..n {
            let a = &mut acts[r * w..(r + 1) * w];
            sigmoid_in_place(&mut a[..2 * h]);
            tanh_in_place(&mut a[2 * h..3 * h]);
            sigmoid_in_place(&mut a[3 * h..]);
            let o = &mut out[r * 2 * h..(r + 1) * 2 * h];
            let (hs, cs) = o.split_at_mut(h);
            for u in 0..h {
                cs[u] = a[u] * a[2 * h + u];
            }
            if let Some(c) = c_prev {
                let p = self.value(c).row(r);
                for u in 0..h {
                    cs[u] += a[h + u] * p[u];
                }
            }
            let tc = &mut tanh_c[r * h..(r + 1) * h];
            tc.copy_from_slice(cs);
            tanh_in_place(tc);
            for u in 0..h {
                hs[u] = a[3 * h + u] * tc[u];
            }
        }
        self.push(
            Tensor::matrix(n, 2 * h, out)?,
            Op::LstmCell {
                gates,
                c_prev,
                acts,
                tanh_c,
            },
        )
    }

    /// Accumulates `∂loss/∂leaf` into every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for k in (0..=loss.0).rev() {
            if !self.nodes[k].needs_grad {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            if let Op::Leaf = self.nodes[k].op {
                if self.leaf_grads.len() < self.nodes.len() {
                    self.leaf_grads.resize(self.nodes.len(), None);
                }
                match &mut self.leaf_grads[k] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            propagate(&self.nodes, k, &g, &mut grads);
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn mat(nodes: &[Node], v: Var) -> MatRef<'_> {
    let t = &nodes[v.0].value;
    MatRef::new(t.data(), t.rows(), t.cols())
}

fn propagate(nodes: &[Node], k: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[k].value;
    let val = |v: Var| &nodes[v.0].value;
    let (rows, cols) = (out.rows(), out.cols());
    let gm = MatRef::new(g, rows, cols);
    match &nodes[k].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                gemm(gm, mat(nodes, *b).t(), da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm(mat(nodes, *a).t(), gm, db);
            }
        }
        Op::MatMulNt(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                gemm(gm, mat(nodes, *b), da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm(gm.t(), mat(nodes, *a), db);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = slot(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                let other = val(*b).data();
                for ((x, gi), o) in d.iter_mut().zip(g).zip(other) {
                    *x += gi * o;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                let other = val(*a).data();
                for ((x, gi), o) in d.iter_mut().zip(g).zip(other) {
                    *x += gi * o;
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(d) = slot(nodes, grads, *row) {
                for grow in g.chunks(cols) {
                    d.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((x, gi), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *x += gi * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((x, gi), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *x += gi * (1.0 - y * y);
                }
            }
        }
        Op::Relu(a) => {
            let input = val(*a).data();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((x, gi), xi) in d.iter_mut().zip(g).zip(input) {
                    if *xi > 0.0 {
                        *x += gi;
                    }
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            let input = val(*a).data();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((x, gi), xi) in d.iter_mut().zip(g).zip(input) {
                    *x += if *xi > 0.0 { *gi } else { slope * gi };
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((drow, grow), yrow) in d
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((x, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *x += y * (gi - dot);
                    }
                }
            }
        }
        Op::Mask(a, mu) => {
            let input = val(*a).data();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((x, gi), xi) in d.iter_mut().zip(g).zip(input) {
                    if *xi > *mu {
                        *x += gi;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if let Some(d) = slot(nodes, grads, p) {
                    for r in 0..rows {
                        let src = &g[r * cols + offset..r * cols + offset + w];
                        d[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if let Some(d) = slot(nodes, grads, p) {
                    d.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(x, y)| *x += y);
                }
                offset += n;
            }
        }
        Op::SliceCols(a, start) => {
            let n = val(*a).cols();
            if let Some(d) = slot(nodes, grads, *a) {
                for r in 0..rows {
                    d[r * n + start..r * n + start + cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Gather(a, idx) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for (r, &i) in idx.iter().enumerate() {
                    d[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::L2Norm(a) => {
            let input = val(*a);
            let n = input.cols();
            if let Some(d) = slot(nodes, grads, *a) {
                for r in 0..input.rows() {
                    let norm = out.data()[r];
                    if norm > 0.0 {
                        let s = g[r] / norm;
                        d[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(input.row(r))
                            .for_each(|(x, xi)| *x += s * xi);
                    }
                }
            }
        }
        Op::Normalize(a) => {
            let input = val(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for r in 0..rows {
                    let norm = input.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let y = out.row(r);
                    let grow = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((x, gi), yi) in d[r * cols..(r + 1) * cols].iter_mut().zip(grow).zip(y) {
                        *x += (gi - yi * dot) / norm;
                    }
                }
            }
        }
        Op::Cosine(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let n = ta.cols();
            for (this, other, thist) in [(*a, tb, ta), (*b, ta, tb)] {
                if let Some(d) = slot(nodes, grads, this) {
                    for r in 0..ta.rows() {
                        let (x, y) = (thist.row(r), other.row(r));
                        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if nx == 0.0 || ny == 0.0 {
                            continue;
                        }
                        let c = out.data()[r];
                        for ((dx, xi), yi) in d[r * n..(r + 1) * n].iter_mut().zip(x).zip(y) {
                            *dx += g[r] * (yi / (nx * ny) - c * xi / (nx * nx));
                        }
                    }
                }
            }
        }
        Op::WeightedRowSum(w, v) => {
            let (tw, tv) = (val(*w), val(*v));
            let m = tw.cols();
            if let Some(dw) = slot(nodes, grads, *w) {
                for i in 0..rows {
                    let grow = &g[i * cols..(i + 1) * cols];
                    for j in 0..m {
                        dw[i * m + j] += grow.iter().zip(tv.row(i * m + j)).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            if let Some(dv) = slot(nodes, grads, *v) {
                for i in 0..rows {
                    let grow = &g[i * cols..(i + 1) * cols];
                    for j in 0..m {
                        let wij = tw.at(i, j);
                        if wij != 0.0 {
                            let r = i * m + j;
                            dv[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(x, y)| *x += wij * y);
                        }
                    }
                }
            }
        }
        Op::RowSum(a) => {
            let n = val(*a).cols();
            if let Some(d) = slot(nodes, grads, *a) {
                for (r, drow) in d.chunks_mut(n).enumerate() {
                    drow.iter_mut().for_each(|x| *x += g[r]);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().for_each(|x| *x += g[0] / n);
            }
        }
        Op::Diag(a) => {
            let n = val(*a).cols();
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..n {
                    d[i * n + i] += g[i];
                }
            }
        }
        Op::LstmCell {
            gates,
            c_prev,
            acts,
            tanh_c,
        } => {
            let h = cols / 2;
            let w = 4 * h;
            let prev = c_prev.map(|c| val(c).data());
            // gradient reaching the cell state of each row
            let mut dc = vec![0.0; rows * h];
            for r in 0..rows {
                let a = &acts[r * w..(r + 1) * w];
                for u in 0..h {
                    let (dh, dcell) = (g[r * cols + u], g[r * cols + h + u]);
                    let tc = tanh_c[r * h + u];
                    dc[r * h + u] = dcell + dh * a[3 * h + u] * (1.0 - tc * tc);
                }
            }
            if let Some(d) = slot(nodes, grads, *gates) {
                for r in 0..rows {
                    let a = &acts[r * w..(r + 1) * w];
                    let drow = &mut d[r * w..(r + 1) * w];
                    for u in 0..h {
                        let dcu = dc[r * h + u];
                        let (i, f, gg, o) = (a[u], a[h + u], a[2 * h + u], a[3 * h + u]);
                        drow[u] += dcu * gg * i * (1.0 - i);
                        if let Some(p) = prev {
                            drow[h + u] += dcu * p[r * h + u] * f * (1.0 - f);
                        }
                        drow[2 * h + u] += dcu * i * (1.0 - gg * gg);
                        drow[3 * h + u] += g[r * cols + u] * tanh_c[r * h + u] * o * (1.0 - o);
                    }
                }
            }
            if let Some(c) = c_prev {
                if let Some(d) = slot(nodes, grads, *c) {
                    for r in 0..rows {
                        for u in 0..h {
                            d[r * h + u] += dc[r * h + u] * acts[r * w + h + u];
                        }
                    }
                }
            }
        }
        Op::LogSumExp(a, exclude_diag) => {
            let input = val(*a);
            let n = input.cols();
            if let Some(d) = slot(nodes, grads, *a) {
                for r in 0..input.rows() {
                    let lse = out.data()[r];
                    for (j, x) in input.row(r).iter().enumerate() {
                        if *exclude_diag && j == r {
                            continue;
                        }
                        d[r * n + j] += g[r] * (x - lse).exp();
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 3, &[1.0, 1.0, 1.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let mut tape = Tape::new();
        let v = tape.constant(t(1, 4, &[0.3, -2.0, 5.0, 0.1])).unwrap();
        let c = tape.cosine_similarity(v, v).unwrap();
        assert!((tape.value(c).item().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_zeroes_entries_at_or_below_threshold() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(1, 3, &[0.5, 0.004, 0.496])).unwrap();
        let m = tape.mask_below_threshold(v, 0.005).unwrap();
        assert_eq!(tape.value(m).data(), &[0.5, 0.0, 0.496]);
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn l2_norm_at_zero_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(1, 3, &[0.0; 3])).unwrap();
        let n = tape.l2_norm(w).unwrap();
        let loss = tape.sum(n).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
        assert_eq!(tape.grad(w).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(1, 2, &[1.0, 2.0])).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
        // a second call accumulates
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_and_numeric_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 3, &[1.0; 6])).unwrap();
        let b = tape.leaf(t(2, 3, &[1.0; 6])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
        assert!(matches!(
            tape.leaf(t(1, 1, &[f64::NAN])),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(tape.gather(a, &[2]), Err(Error::Index(_))));
        let one = tape.leaf(t(1, 1, &[1.0])).unwrap();
        assert!(matches!(
            tape.logsumexp_rows(one, true),
            Err(Error::Contract(_))
        ));
    }
}

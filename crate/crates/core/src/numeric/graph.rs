//! Reverse-mode automatic differentiation over a per-pass computation graph.
//!
//! A [`Graph`] records every operation as it is applied, so node ids are a
//! topological order by construction. [`Graph::backward`] walks the nodes in
//! reverse exactly once and accumulates gradients into the leaves that were
//! registered with `requires_grad`. A graph is built for one forward pass and
//! dropped after its gradients have been read out.

use std::sync::Arc;

use super::gemm::gemm;
use super::{NumericError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive attention-style mask shared between graph nodes.
pub type SharedMask = Arc<Tensor>;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Gather { .. } => "gather",
            Op::SelectRows { .. } => "select_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only populated on leaves.
    grad: Option<Vec<f64>>,
}

/// An append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn dim_err(msg: String) -> NumericError {
    NumericError::Dimension(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a leaf. Gradients are accumulated on it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericError> {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        if tr.numel() != c {
            return Err(dim_err(format!(
                "add_row: row of {} for {c} columns",
                tr.numel()
            )));
        }
        let r = tr.data();
        let data = tx
            .data()
            .chunks_exact(c)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(dim_err(format!(
                "matmul: inner dimensions {k} and {k2} differ ({:?} x {:?})",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut c, false);
        let out = Tensor::new(vec![m, n], c)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(dim_err(format!(
                "matmul_nt: inner dimensions {k} and {k2} differ"
            )));
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut c, false);
        let out = Tensor::new(vec![m, n], c)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    /// Row-wise softmax over the last dimension with an optional additive
    /// mask of `0`/`-inf` entries. The mask has the shape of `x` or a single
    /// row broadcast over all rows.
    pub fn softmax(&mut self, x: Var, mask: Option<&SharedMask>) -> Result<Var, NumericError> {
        let tx = self.value(x);
        let out = softmax_rows(tx, mask.map(|m| m.as_ref()))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumericError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.numel() != c || tb.numel() != c {
            return Err(dim_err(format!(
                "layer_norm: gain/bias of {}/{} for {c} columns",
                tg.numel(),
                tb.numel()
            )));
        }
        let r = tx.rows();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                y[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Looks up rows of an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        let tt = self.value(table);
        let (n, c) = (tt.rows(), tt.cols());
        if ids.is_empty() {
            return Err(dim_err("gather: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(NumericError::Index(format!(
                "gather: id {bad} out of range for table of {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks rows of `x` (repetition allowed) into a new matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericError> {
        let tx = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= tx.rows()) {
            return Err(NumericError::Index(format!(
                "select_rows: row {bad} out of range for {} rows",
                tx.rows()
            )));
        }
        if rows.is_empty() {
            return Err(dim_err("select_rows: empty selection".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * tx.cols());
        for &i in rows {
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new(vec![rows.len(), tx.cols()], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let tx = self.value(x);
        let c = tx.cols();
        if len == 0 || start + len > c {
            return Err(dim_err(format!(
                "slice_cols: [{start}, {}) out of {c} columns",
                start + len
            )));
        }
        let data = tx
            .data()
            .chunks_exact(c)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![tx.rows(), len], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat_cols: no inputs".into()))?;
        let r = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != r) {
            return Err(dim_err("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat_rows: no inputs".into()))?;
        let c = self.value(*first).cols();
        if parts.iter().any(|p| self.value(*p).cols() != c) {
            return Err(dim_err("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let r = data.len() / c;
        let out = Tensor::new(vec![r, c], data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(NumericError::Contract(
                    "l2_normalize: zero row norm".into(),
                ));
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericError> {
        let tl = self.value(logits);
        let (n, v) = (tl.rows(), tl.cols());
        if targets.len() != n {
            return Err(dim_err(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericError::Index(format!(
                "cross_entropy: target {bad} out of range for {v} classes"
            )));
        }
        let probs = softmax_rows(tl, None)?.into_data();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = tl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var, NumericError> {
        let stacked = self.concat_rows(xs)?;
        let s = self.sum(stacked);
        Ok(self.scale(s, 1.0 / xs.len() as f64))
    }

    /// Accumulates `d root / d leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<(), NumericError> {
        if self.value(root).numel() != 1 {
            return Err(NumericError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let slot = &mut self.nodes[idx].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(grads, v, g.iter().copied());
                    }
                }
            }
            Op::AddRow(x, row) => {
                if needs(*x) {
                    accumulate(grads, *x, g.iter().copied());
                }
                if needs(*row) {
                    let c = self.value(*row).numel();
                    let mut dr = vec![0.0; c];
                    for chunk in g.chunks_exact(c) {
                        dr.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    accumulate(grads, *a, g.iter().zip(tb.data()).map(|(d, y)| d * y));
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().zip(ta.data()).map(|(d, x)| d * x));
                }
            }
            Op::Scale(x, f) => {
                if needs(*x) {
                    accumulate(grads, *x, g.iter().map(|d| d * f));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let slot = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, tb.data(), true, slot, true);
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let slot = slot(grads, *b, k * n);
                    gemm(k, m, n, ta.data(), true, g, false, slot, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if needs(*a) {
                    // dA = dC · B
                    let slot = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, tb.data(), false, slot, true);
                }
                if needs(*b) {
                    // dB = dCᵀ · A
                    let slot = slot(grads, *b, n * k);
                    gemm(n, m, k, g, true, ta.data(), false, slot, true);
                }
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    let p = node.value.data();
                    let c = node.value.cols();
                    let mut dx = vec![0.0; p.len()];
                    for ((pr, gr), dr) in p
                        .chunks_exact(c)
                        .zip(g.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                    {
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data();
                if needs(*gain) {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if needs(*bias) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks_exact(c) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *bias, db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (i, ((gr, hr), dr)) in g
                        .chunks_exact(c)
                        .zip(xhat.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                        .enumerate()
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dr[j] = rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let xv = self.value(*x).data();
                    accumulate(
                        grads,
                        *x,
                        g.iter().zip(xv).map(|(d, &v)| {
                            let u = GELU_C * (v + GELU_A * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        }),
                    );
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let tt = self.value(*table);
                    let c = tt.cols();
                    let slot = slot(grads, *table, tt.numel());
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * c..(r + 1) * c];
                        slot[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if needs(*x) {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let slot = slot(grads, *x, tx.numel());
                    for (r, &src_row) in rows.iter().enumerate() {
                        slot[src_row * c..(src_row + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let len = node.value.cols();
                    let slot = slot(grads, *x, tx.numel());
                    for (dst, src) in slot.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        dst[*start..*start + len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let c = tp.cols();
                    if needs(*p) {
                        let slot = slot(grads, *p, tp.numel());
                        for (dst, src) in slot.chunks_exact_mut(c).zip(g.chunks_exact(total)) {
                            dst.iter_mut()
                                .zip(&src[offset..offset + c])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if needs(*p) {
                        accumulate(grads, *p, g[offset..offset + n].iter().copied());
                    }
                    offset += n;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if needs(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut dx = vec![0.0; y.len()];
                    for (i, ((yr, gr), dr)) in y
                        .chunks_exact(c)
                        .zip(g.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                        .enumerate()
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let v = self.value(*logits).cols();
                    let n = targets.len() as f64;
                    let scale = g[0] / n;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        d[i * v + t] -= scale;
                    }
                    accumulate(grads, *logits, d);
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let n = self.value(*x).numel();
                    accumulate(grads, *x, std::iter::repeat(g[0]).take(n));
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, values: impl IntoIterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(values).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(values.into_iter().collect()),
    }
}

/// Numerically stabilised row softmax with an optional additive mask.
pub(crate) fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor, NumericError> {
    let c = x.cols();
    let r = x.rows();
    if let Some(m) = mask {
        let ok = m.cols() == c && (m.rows() == r || m.rows() == 1);
        if !ok {
            return Err(dim_err(format!(
                "softmax mask {:?} not broadcastable to {:?}",
                m.shape(),
                x.shape()
            )));
        }
    }
    let mut out = vec![0.0; r * c];
    let mut buf = vec![0.0; c];
    for i in 0..r {
        let row = x.row(i);
        match mask {
            Some(m) => {
                let mr = if m.rows() == 1 { m.row(0) } else { m.row(i) };
                for j in 0..c {
                    buf[j] = row[j] + mr[j];
                }
            }
            None => buf.copy_from_slice(row),
        }
        let o = &mut out[i * c..(i + 1) * c];
        if buf.iter().any(|v| v.is_nan()) {
            // Let non-finite inputs surface as non-finite outputs.
            o.fill(f64::NAN);
            continue;
        }
        let max = buf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NumericError::DegenerateRow(i));
        }
        let mut total = 0.0;
        for j in 0..c {
            let e = if buf[j] == f64::NEG_INFINITY {
                0.0
            } else {
                (buf[j] - max).exp()
            };
            o[j] = e;
            total += e;
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let col = g.constant(t(&[2, 1], &[2.0, 5.0]));
        let s = g.matmul(row, col).unwrap();
        assert_eq!(g.value(s).data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let mut expect = [0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expect[i * 2 + j] += a.get2(i, k) * b.get2(k, j);
                }
            }
        }
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let p = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(p).data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(NumericError::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[0.0; 4]));
        let s = g.softmax(x, None).unwrap();
        assert!(g.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let x = g.constant(t(&[1, 2], &[10.0, 0.0]));
        let mask = Arc::new(t(&[1, 2], &[0.0, f64::NEG_INFINITY]));
        let s = g.softmax(x, Some(&mask)).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);

        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let s = g.softmax(x, None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (p, v) in g.value(s).data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((p - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let inf = f64::NEG_INFINITY;
        let mask = Arc::new(t(&[2, 2], &[0.0, inf, inf, inf]));
        assert!(matches!(
            g.softmax(x, Some(&mask)),
            Err(NumericError::DegenerateRow(1))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let gain = g.constant(Tensor::filled(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias, 1e-15).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_random_row_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row = Tensor::randn(&[1, 17], 4.0, &mut rng);
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[17], 1.0));
        let bias = g.constant(Tensor::zeros(&[17]));
        let x = g.constant(row);
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let d = g.value(y).data();
        let mean = d.iter().sum::<f64>() / 17.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[3, 64]));
        let l = g.cross_entropy(logits, &[0, 5, 63]).unwrap();
        assert!((g.value(l).item() - 64f64.ln()).abs() < 1e-12);

        let logits = g.constant(t(&[1, 3], &[1000.0, 0.0, 0.0]));
        let l = g.cross_entropy(logits, &[0]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let logits = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            g.cross_entropy(logits, &[3]),
            Err(NumericError::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_softmax_then_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[4, 8], 2.0, &mut rng);
        let targets = [1usize, 7, 0, 3];
        let mut expect = 0.0;
        for (i, &tg) in targets.iter().enumerate() {
            let z: f64 = x.row(i).iter().map(|v| v.exp()).sum();
            expect -= (x.row(i)[tg].exp() / z).ln();
        }
        expect /= 4.0;
        let mut g = Graph::new();
        let v = g.constant(x);
        let l = g.cross_entropy(v, &targets).unwrap();
        assert!((g.value(l).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(Tensor::filled(&[2, 3], 0.7));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // accumulates without reset
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(NumericError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let p = g.mul(x, c).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert!(g.grad(c).is_none());
    }
}

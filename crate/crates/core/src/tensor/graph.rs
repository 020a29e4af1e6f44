use std::collections::HashMap;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, softmax_backward_row, softmax_in_place};
use super::{ParamGrads, ParamStore, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Logit written into masked attention/softmax positions.
pub const MASKED_LOGIT: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(usize),
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    MaskedMeanRows {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    SegmentWeightedSum {
        alpha: Var,
        x: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
    },
    BatchMatMulNt {
        a: Var,
        b: Var,
        batch: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// A single forward computation recorded as a tape.
///
/// Nodes are appended in evaluation order, so walking the tape backwards is
/// a reverse topological order and every node is visited once. Parameters
/// are borrowed from a [`ParamStore`] rather than copied.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> Option<&'p ParamStore> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("param node without a store")
                .tensor(*id),
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// A differentiable leaf whose gradient can be read back.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Looks up a parameter by name. Frozen parameters enter as constants.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let id = store.id(name)?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: !store.is_frozen(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return shape_err("matmul", format!("{m}x{k} * {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    /// a * b^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return shape_err("matmul_nt", format!("{m}x{k} * ({n}x{k2})^T"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push("transpose", Tensor::matrix(n, m, out)?, Op::Transpose(a), rg)
    }

    /// Blockwise product: `a` is `batch` stacked (m x k) blocks, `b` is
    /// `batch` stacked (k x n) blocks; returns `batch` stacked (m x n) blocks.
    pub fn batch_matmul(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ra, k) = self.dims(a);
        let (rb, n) = self.dims(b);
        if batch == 0 || ra % batch != 0 || rb != batch * k {
            return shape_err(
                "batch_matmul",
                format!("{ra}x{k} and {rb}x{n} with batch {batch}"),
            );
        }
        let m = ra / batch;
        let mut out = vec![0.0; ra * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for t in 0..batch {
            gemm_nn(
                &ad[t * m * k..(t + 1) * m * k],
                &bd[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(
            "batch_matmul",
            Tensor::matrix(ra, n, out)?,
            Op::BatchMatMul { a, b, batch },
            rg,
        )
    }

    /// Blockwise a_t * b_t^T with `a` = batch x (m x k), `b` = batch x (n x k).
    pub fn batch_matmul_nt(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ra, k) = self.dims(a);
        let (rb, k2) = self.dims(b);
        if batch == 0 || k != k2 || ra % batch != 0 || rb % batch != 0 {
            return shape_err(
                "batch_matmul_nt",
                format!("{ra}x{k} and {rb}x{k2} with batch {batch}"),
            );
        }
        let (m, n) = (ra / batch, rb / batch);
        let mut out = vec![0.0; ra * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for t in 0..batch {
            gemm_nt(
                &ad[t * m * k..(t + 1) * m * k],
                &bd[t * n * k..(t + 1) * n * k],
                m,
                k,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(
            "batch_matmul_nt",
            Tensor::matrix(ra, n, out)?,
            Op::BatchMatMulNt { a, b, batch },
            rg,
        )
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(bias).numel() != n {
            return shape_err(
                "add_row",
                format!("{m}x{n} + bias of {} values", self.value(bias).numel()),
            );
        }
        let b = self.data(bias);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, bias]);
        self.push("add_row", t, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push("scale", t, Op::Scale(a, c), rg)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { x.exp_m1() })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push("elu", t, Op::Elu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push("relu", t, Op::Relu(a), rg)
    }

    // ---- normalization ---------------------------------------------------

    /// Row-wise softmax. With `col_mask`, columns marked `false` get
    /// [`MASKED_LOGIT`] before normalization.
    pub fn softmax_rows(&mut self, a: Var, col_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if n == 0 {
            return shape_err("softmax_rows", "zero-width rows");
        }
        if let Some(mask) = col_mask {
            if mask.len() != n {
                return shape_err("softmax_rows", format!("mask {} for {n} cols", mask.len()));
            }
        }
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            if let Some(mask) = col_mask {
                for (v, &keep) in row.iter_mut().zip(mask) {
                    if !keep {
                        *v = MASKED_LOGIT;
                    }
                }
            }
            softmax_in_place(row);
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a]);
        self.push("softmax_rows", t, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis (population variance,
    /// epsilon 1e-5 inside the square root).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if n == 0 {
            return shape_err("layer_norm", "zero-length last axis");
        }
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return shape_err("layer_norm", format!("gain/bias must have {n} values"));
        }
        let (xd, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of each row of `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if m == 0 || targets.len() != m {
            return shape_err(
                "cross_entropy",
                format!("{m} rows vs {} targets", targets.len()),
            );
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return invalid(format!("target {t} out of range for {n} classes"));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(n).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    // ---- reductions and reshaping ----------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        let m = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return shape_err("concat_cols", format!("row counts {m} vs {r}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..m {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.rg(parts);
        self.push(
            "concat_cols",
            Tensor::matrix(m, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows", "no inputs");
        };
        let n = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return shape_err("concat_rows", format!("column counts {n} vs {c}"));
            }
            out.extend_from_slice(self.data(p));
            rows += r;
        }
        let rg = self.rg(parts);
        self.push(
            "concat_rows",
            Tensor::matrix(rows, n, out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > m {
            return shape_err("slice_rows", format!("rows {start}..{} of {m}", start + len));
        }
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "slice_rows",
            Tensor::matrix(len, n, out)?,
            Op::SliceRows { x, start },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    /// Selects rows by index (embedding lookup, row permutation).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.data(x);
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return shape_err("gather_rows", format!("row {i} of {m}"));
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(
            "gather_rows",
            Tensor::matrix(index.len(), n, out)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if group == 0 || m == 0 || m % group != 0 {
            return shape_err("group_mean", format!("{m} rows in groups of {group}"));
        }
        let g = m / group;
        let src = self.data(x);
        let mut out = vec![0.0; g * n];
        let w = 1.0 / group as f64;
        for r in 0..m {
            axpy(w, &src[r * n..(r + 1) * n], &mut out[(r / group) * n..(r / group + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(
            "group_mean",
            Tensor::matrix(g, n, out)?,
            Op::GroupMean { x, group },
            rg,
        )
    }

    /// Mean over the rows marked `true`, as a 1 x cols matrix.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if mask.len() != m {
            return shape_err("masked_mean_rows", format!("mask {} for {m} rows", mask.len()));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return invalid("masked_mean_rows: every row is masked");
        }
        let src = self.data(x);
        let mut out = vec![0.0; n];
        let w = 1.0 / count as f64;
        for (r, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
            axpy(w, &src[r * n..(r + 1) * n], &mut out);
        }
        let rg = self.rg(&[x]);
        self.push(
            "masked_mean_rows",
            Tensor::matrix(1, n, out)?,
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
                count,
            },
            rg,
        )
    }

    /// out[g] = sum_i alpha[g, i] * x[g * width + i] for `alpha` of shape
    /// G x width and `x` of shape (G * width) x cols.
    pub fn segment_weighted_sum(&mut self, alpha: Var, x: Var) -> Result<Var> {
        let (g, w) = self.dims(alpha);
        let (m, n) = self.dims(x);
        if m != g * w {
            return shape_err(
                "segment_weighted_sum",
                format!("weights {g}x{w} for {m} rows"),
            );
        }
        let (a, src) = (self.data(alpha), self.data(x));
        let mut out = vec![0.0; g * n];
        for s in 0..g {
            for i in 0..w {
                let r = s * w + i;
                axpy(a[r], &src[r * n..(r + 1) * n], &mut out[s * n..(s + 1) * n]);
            }
        }
        let rg = self.rg(&[alpha, x]);
        self.push(
            "segment_weighted_sum",
            Tensor::matrix(g, n, out)?,
            Op::SegmentWeightedSum { alpha, x },
            rg,
        )
    }

    // ---- attention -------------------------------------------------------

    /// Fused multi-head scaled dot-product attention over independent
    /// sequences of `seq_len` consecutive rows.
    ///
    /// For each sequence and head, with `d_k = cols / heads`, the weights
    /// are `softmax_rows(K Q^T / sqrt(d_k))` and the output is `weights * V`.
    /// `key_mask` (one flag per row) masks the corresponding columns.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (m, d) = self.dims(q);
        if self.dims(k) != (m, d) || self.dims(v) != (m, d) {
            return shape_err("attention", "q, k, v must have equal shapes");
        }
        if m == 0 || seq_len == 0 {
            return shape_err("attention", "empty sequence");
        }
        if heads == 0 || d % heads != 0 {
            return shape_err("attention", format!("{d} columns over {heads} heads"));
        }
        if m % seq_len != 0 {
            return shape_err("attention", format!("{m} rows in sequences of {seq_len}"));
        }
        if let Some(mask) = key_mask {
            if mask.len() != m {
                return shape_err("attention", format!("mask {} for {m} rows", mask.len()));
            }
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let nseq = m / seq_len;
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut weights = vec![0.0; nseq * heads * seq_len * seq_len];
        let mut out = vec![0.0; m * d];
        for s in 0..nseq {
            let r0 = s * seq_len;
            for h in 0..heads {
                let c0 = h * dk;
                let wblock = &mut weights[(s * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let krow = &kd[(r0 + i) * d + c0..(r0 + i) * d + c0 + dk];
                    let wrow = &mut wblock[i * seq_len..(i + 1) * seq_len];
                    for (j, w) in wrow.iter_mut().enumerate() {
                        let masked = key_mask.is_some_and(|mk| !mk[r0 + j]);
                        *w = if masked {
                            MASKED_LOGIT
                        } else {
                            dot(krow, &qd[(r0 + j) * d + c0..(r0 + j) * d + c0 + dk]) * scale
                        };
                    }
                    softmax_in_place(wrow);
                    let orow = &mut out[(r0 + i) * d + c0..(r0 + i) * d + c0 + dk];
                    for (j, &w) in wrow.iter().enumerate() {
                        axpy(w, &vd[(r0 + j) * d + c0..(r0 + j) * d + c0 + dk], orow);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            Tensor::matrix(m, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                weights,
            },
            rg,
        )
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut leaves = HashMap::new();
        let mut params = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    leaves.insert(idx, gout);
                }
                Op::Param(id) => params.push((*id, gout)),
                op => self.backprop_op(op, Var(idx), &gout, &mut grads),
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_op(&self, op: &Op, out: Var, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(gout, self.data(*b), m, n, k, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(self.data(*a), gout, k, m, n, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nn(gout, self.data(*b), m, n, k, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(gout, self.data(*a), n, m, k, gb);
                }
            }
            Op::BatchMatMul { a, b, batch } => {
                let (ra, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let m = ra / batch;
                if let Some(ga) = self.acc(grads, *a) {
                    let bd = self.data(*b);
                    for t in 0..*batch {
                        gemm_nt(
                            &gout[t * m * n..(t + 1) * m * n],
                            &bd[t * k * n..(t + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let ad = self.data(*a);
                    for t in 0..*batch {
                        gemm_tn(
                            &ad[t * m * k..(t + 1) * m * k],
                            &gout[t * m * n..(t + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut gb[t * k * n..(t + 1) * k * n],
                        );
                    }
                }
            }
            Op::BatchMatMulNt { a, b, batch } => {
                let (ra, k) = self.dims(*a);
                let rb = self.dims(*b).0;
                let (m, n) = (ra / batch, rb / batch);
                if let Some(ga) = self.acc(grads, *a) {
                    let bd = self.data(*b);
                    for t in 0..*batch {
                        gemm_nn(
                            &gout[t * m * n..(t + 1) * m * n],
                            &bd[t * n * k..(t + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let ad = self.data(*a);
                    for t in 0..*batch {
                        gemm_tn(
                            &gout[t * m * n..(t + 1) * m * n],
                            &ad[t * m * k..(t + 1) * m * k],
                            n,
                            m,
                            k,
                            &mut gb[t * n * k..(t + 1) * n * k],
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gout[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, gout, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(1.0, gout, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, gout, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(-1.0, gout, gb);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((g, &o), &y) in ga.iter_mut().zip(gout).zip(self.data(*b)) {
                        *g += o * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((g, &o), &x) in gb.iter_mut().zip(gout).zip(self.data(*a)) {
                        *g += o * x;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, gout, ga);
                }
                let n = self.dims(*a).1;
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in gout.chunks(n.max(1)) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(*c, gout, ga);
                }
            }
            Op::Elu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((g, &o), &x) in ga.iter_mut().zip(gout).zip(self.data(*a)) {
                        *g += if x > 0.0 { o } else { o * x.exp() };
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((g, &o), &x) in ga.iter_mut().zip(gout).zip(self.data(*a)) {
                        if x > 0.0 {
                            *g += o;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = self.dims(*a).1;
                let y = self.data(out);
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..y.len() / n {
                        let s = r * n..(r + 1) * n;
                        softmax_backward_row(&y[s.clone()], &gout[s.clone()], &mut ga[s]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x);
                if let Some(gg) = self.acc(grads, *gain) {
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += gout[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in gout.chunks(n) {
                        axpy(1.0, row, gb);
                    }
                }
                let g = self.data(*gain);
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let h = &xhat[r * n..(r + 1) * n];
                        for c in 0..n {
                            dxhat[c] = gout[r * n + c] * g[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dot(&dxhat, h) / n as f64;
                        for c in 0..n {
                            gx[r * n + c] += inv_std[r] * (dxhat[c] - mean_d - h[c] * mean_dh);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = self.dims(*logits);
                let w = gout[0] / m as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for r in 0..m {
                        for c in 0..n {
                            let y = if c == targets[r] { 1.0 } else { 0.0 };
                            gl[r * n + c] += w * (probs[r * n + c] - y);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for g in ga.iter_mut() {
                        *g += gout[0];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.dims(out).1;
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = self.dims(p);
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..m {
                            axpy(
                                1.0,
                                &gout[r * total + offset..r * total + offset + w],
                                &mut gp[r * w..(r + 1) * w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.acc(grads, p) {
                        axpy(1.0, &gout[offset..offset + len], gp);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(1.0, gout, &mut gx[start * n..start * n + gout.len()]);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(1.0, gout, gx);
                }
            }
            Op::GatherRows { x, index } => {
                let n = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in index.iter().enumerate() {
                        axpy(1.0, &gout[r * n..(r + 1) * n], &mut gx[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::GroupMean { x, group } => {
                let (m, n) = self.dims(*x);
                let w = 1.0 / *group as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        let gr = r / group;
                        axpy(w, &gout[gr * n..(gr + 1) * n], &mut gx[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::MaskedMeanRows { x, mask, count } => {
                let n = self.dims(*x).1;
                let w = 1.0 / *count as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
                        axpy(w, gout, &mut gx[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SegmentWeightedSum { alpha, x } => {
                let (g, w) = self.dims(*alpha);
                let n = self.dims(*x).1;
                let (a, src) = (self.data(*alpha), self.data(*x));
                if let Some(ga) = self.acc(grads, *alpha) {
                    for s in 0..g {
                        for i in 0..w {
                            let r = s * w + i;
                            ga[r] += dot(&gout[s * n..(s + 1) * n], &src[r * n..(r + 1) * n]);
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..g {
                        for i in 0..w {
                            let r = s * w + i;
                            axpy(a[r], &gout[s * n..(s + 1) * n], &mut gx[r * n..(r + 1) * n]);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                weights,
            } => self.attention_backward(*q, *k, *v, *heads, *seq_len, weights, gout, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        weights: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (m, d) = self.dims(q);
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let nseq = m / seq_len;
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut gq = vec![0.0; m * d];
        let mut gk = vec![0.0; m * d];
        let mut gv = vec![0.0; m * d];
        let mut dw = vec![0.0; seq_len];
        let mut ds = vec![0.0; seq_len];
        for s in 0..nseq {
            let r0 = s * seq_len;
            for h in 0..heads {
                let c0 = h * dk;
                let wblock = &weights[(s * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let wrow = &wblock[i * seq_len..(i + 1) * seq_len];
                    let go = &gout[(r0 + i) * d + c0..(r0 + i) * d + c0 + dk];
                    for j in 0..seq_len {
                        let vrow = (r0 + j) * d + c0;
                        dw[j] = dot(go, &vd[vrow..vrow + dk]);
                        axpy(wrow[j], go, &mut gv[vrow..vrow + dk]);
                    }
                    ds.iter_mut().for_each(|x| *x = 0.0);
                    softmax_backward_row(wrow, &dw, &mut ds);
                    let krow = (r0 + i) * d + c0;
                    for j in 0..seq_len {
                        let qrow = (r0 + j) * d + c0;
                        let sij = ds[j] * scale;
                        if sij == 0.0 {
                            continue;
                        }
                        axpy(sij, &qd[qrow..qrow + dk], &mut gk[krow..krow + dk]);
                        axpy(sij, &kd[krow..krow + dk], &mut gq[qrow..qrow + dk]);
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(acc) = self.acc(grads, var) {
                axpy(1.0, &g, acc);
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: Vec<(usize, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to an `input` leaf (zeros if unreachable).
    pub fn wrt(&self, graph: &Graph<'_>, v: Var) -> Tensor {
        let shape = graph.shape(v).to_vec();
        match self.leaves.get(&v.0) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients for every parameter in `store`, zero where unreachable.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut all = ParamGrads::zeros_like(store);
        for (id, g) in &self.params {
            all.by_id_mut(*id).data_mut().copy_from_slice(g);
        }
        all
    }

    /// Folds this backward pass into an existing accumulator.
    pub fn accumulate_into(&self, acc: &mut ParamGrads) {
        for (id, g) in &self.params {
            axpy(1.0, g, acc.by_id_mut(*id).data_mut());
        }
    }

    pub fn to_param_grads(self, store: &ParamStore) -> ParamGrads {
        let mut all: Vec<Tensor> = (0..store.len())
            .map(|i| Tensor::zeros(store.tensor(i).shape()))
            .collect();
        for (id, g) in self.params {
            all[id] = Tensor::new(store.tensor(id).shape().to_vec(), g).expect("gradient shape");
        }
        ParamGrads::from_vec(all)
    }
}

//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] borrows a [`ParameterSet`] for its lifetime, records every
//! operation as a node, and `backward` walks the tape once in reverse. Nodes
//! that do not depend on a trainable parameter are never differentiated, so
//! frozen sub-networks cost forward time only.

use std::borrow::Cow;
use std::collections::HashMap;

use super::gemm::{gemm, View};
use super::params::{Gradients, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Boolean attention mask; `true` means the query may attend to the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttnMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| k <= q)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for k in 0..cols {
                allowed.push(f(q, k));
            }
        }
        AttnMask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    pub fn is_all_true(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// First query row without any allowed key, if one exists.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&q| !self.allowed[q * self.cols..(q + 1) * self.cols].contains(&true))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    Mean(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logit: Var,
        target: f64,
    },
    RowCosine {
        a: Var,
        b: Var,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const COS_EPS: f64 = 1e-12;

pub struct Graph<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<usize, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `heads × Lq × Lk`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Every attention node recorded so far, in creation order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Attention { .. }))
            .map(|(i, _)| Var(i))
            .collect()
    }

    fn push(&mut self, value: Cow<'p, [f64]>, rows: usize, cols: usize, op: Op) -> Result<Var> {
        debug_assert_eq!(value.len(), rows * cols);
        if !matches!(op, Op::Param(_)) && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name(&op).to_string()));
        }
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(id) => self.params.entry(*id).trainable,
            _ => op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let t = &self.params.entry(id).value;
        let (rows, cols) = (t.rows(), t.cols());
        let v = self.push(Cow::Borrowed(t.data()), rows, cols, Op::Param(id))?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        self.input_data(t.rows(), t.cols(), t.data().to_vec())
    }

    pub fn input_data(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "input",
                format!("{rows}×{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        self.push(Cow::Owned(data), rows, cols, Op::Input)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}×{k} · {k2}×{n}")));
        }
        let out = super::gemm::matmul(self.value(a), self.value(b), m, k, n);
        self.push(Cow::Owned(out), m, n, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("{m}×{k} · ({n}×{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            self.value(a),
            View::dense(m, k),
            self.value(b),
            View::dense(n, k).t(),
            0.0,
            &mut out,
            View::dense(m, n),
        );
        self.push(Cow::Owned(out), m, n, Op::MatMulT(a, b))
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(name, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(Cow::Owned(out), r, c, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast-add a `1×d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(Error::shape(
                "add_row",
                format!("{r}×{c} + {:?}", self.shape(row)),
            ));
        }
        let b = self.value(row);
        let out: Vec<f64> = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|xr| xr.iter().zip(b).map(|(u, v)| u + v))
            .collect();
        self.push(Cow::Owned(out), r, c, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(Cow::Owned(out), r, c, Op::Scale(x, s))
    }

    pub fn add_const(&mut self, x: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| v + s).collect();
        self.push(Cow::Owned(out), r, c, Op::AddConst(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(Cow::Owned(out), r, c, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(Cow::Owned(out), r, c, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(Cow::Owned(out), r, c, Op::Sigmoid(x))
    }

    /// Row-wise layer normalisation with `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::shape("layer_norm", format!("input {r}×{c}")));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Cow::Owned(out),
            r,
            c,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scaled dot-product attention split over `heads` column blocks.
    ///
    /// `q` is `Lq×d`, `k` and `v` are `Lk×d`. Masked keys get exactly zero
    /// weight; a query row with no allowed key is an error.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttnMask>) -> Result<Var> {
        let (lq, d) = self.shape(q);
        let (lk, dk) = self.shape(k);
        if self.shape(v) != (lk, dk) || dk != d {
            return Err(Error::shape(
                "attention",
                format!("q {lq}×{d}, k {lk}×{dk}, v {:?}", self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("model dim {d} not divisible by {heads} heads"),
            ));
        }
        if let Some(m) = mask {
            if m.rows() != lq || m.cols() != lk {
                return Err(Error::shape(
                    "attention",
                    format!("mask {}×{} for scores {lq}×{lk}", m.rows(), m.cols()),
                ));
            }
            if let Some(row) = m.first_empty_row() {
                return Err(Error::MaskedRow { row });
            }
        } else if lk == 0 && lq > 0 {
            return Err(Error::MaskedRow { row: 0 });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            gemm(
                scale,
                qv,
                View::cols_of(lq, d, h * dh, dh),
                kv,
                View::cols_of(lk, d, h * dh, dh).t(),
                0.0,
                p,
                View::dense(lq, lk),
            );
            for i in 0..lq {
                let row = &mut p[i * lk..(i + 1) * lk];
                let allowed = |j: usize| mask.map_or(true, |m| m.allows(i, j));
                let mut mx = f64::NEG_INFINITY;
                for (j, s) in row.iter().enumerate() {
                    if allowed(j) && *s > mx {
                        mx = *s;
                    }
                }
                let mut z = 0.0;
                for (j, s) in row.iter_mut().enumerate() {
                    if allowed(j) {
                        *s = (*s - mx).exp();
                        z += *s;
                    } else {
                        *s = 0.0;
                    }
                }
                row.iter_mut().for_each(|s| *s /= z);
            }
            gemm(
                1.0,
                p,
                View::dense(lq, lk),
                vv,
                View::cols_of(lk, d, h * dh, dh),
                0.0,
                &mut out,
                View::cols_of(lq, d, h * dh, dh),
            );
        }
        self.push(
            Cow::Owned(out),
            lq,
            d,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_rows"));
        };
        let c = self.cols(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.cols(p) != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} cols vs {c}", self.cols(p)),
                ));
            }
            rows += self.rows(p);
            out.extend_from_slice(self.value(p));
        }
        self.push(Cow::Owned(out), rows, c, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        self.push(Cow::Owned(out), len, c, Op::SliceRows { x, start })
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::shape("gather", format!("row {id} of {r}")));
            }
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        self.push(
            Cow::Owned(out),
            ids.len(),
            c,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(Cow::Owned(out), 1, c, Op::MeanRows(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let m = self.value(x).iter().sum::<f64>() / n as f64;
        self.push(Cow::Owned(vec![m]), 1, 1, Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum::<f64>();
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Sum(x))
    }

    /// Mean token cross-entropy of row-wise softmax(logits) against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{r} rows, {} targets", targets.len()),
            ));
        }
        if r == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let t = targets[i];
            if t >= c {
                return Err(Error::shape("cross_entropy", format!("target {t} of {c} classes")));
            }
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lz = z.ln() + mx;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lz).exp();
            }
            loss += lz - row[t];
        }
        loss /= r as f64;
        self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `target` for a `1×1` logit.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        if self.shape(logit) != (1, 1) {
            return Err(Error::shape("bce_with_logits", format!("{:?}", self.shape(logit))));
        }
        let z = self.scalar(logit);
        let loss = z.max(0.0) - target * z + (-z.abs()).exp().ln_1p();
        self.push(Cow::Owned(vec![loss]), 1, 1, Op::BceWithLogits { logit, target })
    }

    /// Cosine similarity of matching rows, as an `L×1` column.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("row_cosine", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut na = vec![0.0; r];
        let mut nb = vec![0.0; r];
        let mut out = vec![0.0; r];
        for i in 0..r {
            let (x, y) = (&av[i * c..(i + 1) * c], &bv[i * c..(i + 1) * c]);
            na[i] = super::tensor::norm(x).max(COS_EPS);
            nb[i] = super::tensor::norm(y).max(COS_EPS);
            out[i] = super::tensor::dot(x, y) / (na[i] * nb[i]);
        }
        self.push(Cow::Owned(out), r, 1, Op::RowCosine { a, b, na, nb })
    }

    /// Reverse pass from a `1×1` loss. Gradients are produced only for
    /// trainable parameters.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        let mut grads = Gradients::zeros_like(self.params);
        if !self.nodes[loss.0].needs_grad {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut adj, &mut grads);
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("backward".into()));
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<'p>, g: &[f64], adj: &mut [Option<Vec<f64>>], grads: &mut Gradients) {
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Input => {}
            Op::Param(id) => grads.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(1.0, g, View::dense(m, n), self.value(*b), View::dense(k, n).t(), 0.0, &mut da, View::dense(m, k));
                    acc(adj, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(1.0, self.value(*a), View::dense(m, k).t(), g, View::dense(m, n), 0.0, &mut db, View::dense(k, n));
                    acc(adj, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(1.0, g, View::dense(m, n), self.value(*b), View::dense(n, k), 0.0, &mut da, View::dense(m, k));
                    acc(adj, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(1.0, g, View::dense(m, n).t(), self.value(*a), View::dense(m, k), 0.0, &mut db, View::dense(n, k));
                    acc(adj, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(adj, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(adj, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(adj, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(adj, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(adj, *a, g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    acc(adj, *b, g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    acc(adj, *x, g.to_vec());
                }
                if self.wants(*row) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c.max(1)) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    acc(adj, *row, db);
                }
            }
            Op::Scale(x, s) => acc(adj, *x, g.iter().map(|v| v * s).collect()),
            Op::AddConst(x) => acc(adj, *x, g.to_vec()),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(adj, *x, g.iter().zip(xv).map(|(gv, &u)| gv * gelu_grad(u)).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(adj, *x, g.iter().zip(xv).map(|(gv, &u)| if u > 0.0 { *gv } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(adj, *x, g.iter().zip(y.iter()).map(|(gv, s)| gv * s * (1.0 - s)).collect());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    acc(adj, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    acc(adj, *beta, db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; r * c];
                    let cf = c as f64;
                    for i in 0..r {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = g[i * c + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = g[i * c + j] * gv[j];
                            dx[i * c + j] = inv_std[i] * (dh - s1 / cf - xhat[i * c + j] * s2 / cf);
                        }
                    }
                    acc(adj, *x, dx);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (lq, d) = (r, c);
                let lk = self.rows(*k);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; lq * d];
                let mut dk = vec![0.0; lk * d];
                let mut dv = vec![0.0; lk * d];
                let mut dp = vec![0.0; lq * lk];
                for h in 0..*heads {
                    let p = &probs[h * lq * lk..(h + 1) * lq * lk];
                    let cols_q = View::cols_of(lq, d, h * dh, dh);
                    let cols_k = View::cols_of(lk, d, h * dh, dh);
                    // dV_h = Pᵀ · dO_h
                    gemm(1.0, p, View::dense(lq, lk).t(), g, cols_q, 0.0, &mut dv, cols_k);
                    // dP = dO_h · V_hᵀ
                    gemm(1.0, g, cols_q, vv, cols_k.t(), 0.0, &mut dp, View::dense(lq, lk));
                    for i in 0..lq {
                        let pr = &p[i * lk..(i + 1) * lk];
                        let dr = &mut dp[i * lk..(i + 1) * lk];
                        let dotp: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (dj, pj) in dr.iter_mut().zip(pr) {
                            *dj = pj * (*dj - dotp) * scale;
                        }
                    }
                    gemm(1.0, &dp, View::dense(lq, lk), kv, cols_k, 0.0, &mut dq, cols_q);
                    gemm(1.0, &dp, View::dense(lq, lk).t(), qv, cols_q, 0.0, &mut dk, cols_k);
                }
                if self.wants(*q) {
                    acc(adj, *q, dq);
                }
                if self.wants(*k) {
                    acc(adj, *k, dk);
                }
                if self.wants(*v) {
                    acc(adj, *v, dv);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        acc(adj, *p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let (xr, xc) = self.shape(*x);
                let mut dx = vec![0.0; xr * xc];
                dx[start * xc..start * xc + g.len()].copy_from_slice(g);
                acc(adj, *x, dx);
            }
            Op::Gather { table, ids } => {
                let (tr, tc) = self.shape(*table);
                let mut dt = vec![0.0; tr * tc];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..tc {
                        dt[id * tc + j] += g[i * tc + j];
                    }
                }
                acc(adj, *table, dt);
            }
            Op::MeanRows(x) => {
                let xr = self.rows(*x);
                let mut dx = Vec::with_capacity(xr * c);
                for _ in 0..xr {
                    dx.extend(g.iter().map(|v| v / xr as f64));
                }
                acc(adj, *x, dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(adj, *x, vec![g[0] / n as f64; n]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(adj, *x, vec![g[0]; n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (lr, lc) = self.shape(*logits);
                let s = g[0] / lr as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * lc + t] -= s;
                }
                acc(adj, *logits, dl);
            }
            Op::BceWithLogits { logit, target } => {
                let z = self.scalar(*logit);
                acc(adj, *logit, vec![g[0] * (sigmoid(z) - target)]);
            }
            Op::RowCosine { a, b, na, nb } => {
                let (ar, ac) = self.shape(*a);
                let (av, bv) = (self.value(*a), self.value(*b));
                let cosv = &node.value;
                let mut da = vec![0.0; ar * ac];
                let mut db = vec![0.0; ar * ac];
                for i in 0..ar {
                    let gi = g[i];
                    let inv = 1.0 / (na[i] * nb[i]);
                    for j in 0..ac {
                        let (x, y) = (av[i * ac + j], bv[i * ac + j]);
                        da[i * ac + j] = gi * (y * inv - cosv[i] * x / (na[i] * na[i]));
                        db[i * ac + j] = gi * (x * inv - cosv[i] * y / (nb[i] * nb[i]));
                    }
                }
                if self.wants(*a) {
                    acc(adj, *a, da);
                }
                if self.wants(*b) {
                    acc(adj, *b, db);
                }
            }
        }
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(x, _) | Op::AddConst(x) | Op::Gelu(x) | Op::Relu(x) | Op::Sigmoid(x) => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::ConcatRows(parts) => parts.clone(),
        Op::SliceRows { x, .. } => vec![*x],
        Op::Gather { table, .. } => vec![*table],
        Op::MeanRows(x) | Op::Mean(x) | Op::Sum(x) => vec![*x],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::BceWithLogits { logit, .. } => vec![*logit],
        Op::RowCosine { a, b, .. } => vec![*a, *b],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulT(..) => "matmul_t",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::Gelu(..) => "gelu",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention { .. } => "attention",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::Gather { .. } => "gather",
        Op::MeanRows(..) => "mean_rows",
        Op::Mean(..) => "mean",
        Op::Sum(..) => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::BceWithLogits { .. } => "bce_with_logits",
        Op::RowCosine { .. } => "row_cosine",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

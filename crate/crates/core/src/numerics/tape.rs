//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Leaves are
//! either constants or parameters tagged with a caller-chosen id; only
//! parameters (and values derived from them) receive gradients, which is how
//! frozen weights are realized. Every op checks its output for NaN/Inf and
//! fails with [`Error::Numeric`] instead of propagating.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::numerics::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_trans: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleVar(Var, Var),
    Mul(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, causal: bool },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Sum(Var),
}

struct Node<'p> {
    rows: usize,
    cols: usize,
    value: Cow<'p, [f64]>,
    op: Op,
    needs_grad: bool,
    param: Option<usize>,
}

/// Gradients of a scalar loss keyed by parameter id.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_param: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_map(self) -> BTreeMap<usize, Tensor> {
        self.by_param
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool, what: &str) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(what.to_string()));
        }
        self.nodes.push(Node { rows, cols, value: Cow::Owned(value), op, needs_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, t: Cow<'p, [f64]>, shape: [usize; 2], param: Option<usize>) -> Var {
        self.nodes.push(Node {
            rows: shape[0],
            cols: shape[1],
            value: t,
            op: Op::Leaf,
            needs_grad: param.is_some(),
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &'p Tensor) -> Var {
        self.leaf(Cow::Borrowed(t.data()), t.shape(), None)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        let shape = t.shape();
        self.leaf(Cow::Owned(t.into_data()), shape, None)
    }

    /// Inserts a trainable leaf. Gradients are reported under `id`; inserting
    /// the same id twice sums both contributions.
    pub fn param(&mut self, t: &'p Tensor, id: usize) -> Var {
        self.leaf(Cow::Borrowed(t.data()), t.shape(), Some(id))
    }

    pub fn param_owned(&mut self, t: Tensor, id: usize) -> Var {
        let shape = t.shape();
        self.leaf(Cow::Owned(t.into_data()), shape, Some(id))
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let n = &self.nodes[v.0];
        [n.rows, n.cols]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.rows, n.cols, n.value.to_vec()).expect("node shape is consistent")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `a * b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`; with `b` stored `n x k` this is the usual `x W^T` linear map.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [br, bc] = self.shape(b);
        let (k2, n) = if b_trans { (bc, br) } else { (br, bc) };
        if k != k2 {
            return dim_err(format!(
                "matmul{} {m}x{k} by {br}x{bc}",
                if b_trans { "_t" } else { "" }
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), b_trans, &mut out, 0.0);
        let ng = self.needs(a) || self.needs(b);
        self.push(m, n, out, Op::MatMul { a, b, b_trans }, ng, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa != self.shape(b) {
            return dim_err(format!("add {:?} and {:?}", sa, self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(sa[0], sa[1], out, Op::Add(a, b), ng, "add")
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if self.shape(bias) != [1, n] {
            return dim_err(format!("add_row {m}x{n} with bias {:?}", self.shape(bias)));
        }
        let bv = self.value(bias);
        let out = self.value(a).chunks(n.max(1)).flat_map(|r| r.iter().zip(bv).map(|(x, y)| x + y)).collect();
        let ng = self.needs(a) || self.needs(bias);
        self.push(m, n, out, Op::AddRow(a, bias), ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let [m, n] = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.needs(a);
        self.push(m, n, out, Op::Scale(a, s), ng, "scale")
    }

    /// Multiplies `a` by the `1 x 1` variable `s`.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1, 1] {
            return dim_err(format!("scale_var needs a 1x1 scale, got {:?}", self.shape(s)));
        }
        let [m, n] = self.shape(a);
        let sv = self.scalar(s);
        let out = self.value(a).iter().map(|x| sv * x).collect();
        let ng = self.needs(a) || self.needs(s);
        self.push(m, n, out, Op::ScaleVar(a, s), ng, "scale_var")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa != self.shape(b) {
            return dim_err(format!("mul {:?} and {:?}", sa, self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(sa[0], sa[1], out, Op::Mul(a, b), ng, "mul")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let ng = self.needs(a);
        self.push(m, n, out, Op::Gelu(a), ng, "gelu")
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [m, n] = self.shape(x);
        if n == 0 || self.shape(gamma) != [1, n] || self.shape(beta) != [1, n] {
            return dim_err(format!("layer_norm over {m}x{n}"));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(m, n, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng, "layer_norm")
    }

    /// Softmax along each row. With `causal`, entry `(i, j)` for `j > i` is
    /// masked to zero probability (requires a square input).
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let [m, n] = self.shape(x);
        if n == 0 {
            return dim_err("softmax over an empty axis");
        }
        if causal && m != n {
            return dim_err(format!("causal softmax needs a square input, got {m}x{n}"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let width = if causal { i + 1 } else { n };
            let row = &xv[i * n..i * n + width];
            softmax_into(row, &mut out[i * n..i * n + width]);
        }
        let ng = self.needs(x);
        self.push(m, n, out, Op::Softmax { x, causal }, ng, "softmax")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let [m, n] = self.shape(x);
        if start + width > n {
            return dim_err(format!("slice_cols {start}..{} of {n}", start + width));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + width]);
        }
        let ng = self.needs(x);
        self.push(m, width, out, Op::SliceCols { x, start }, ng, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero parts");
        };
        let m = self.shape(first)[0];
        if parts.iter().any(|&p| self.shape(p)[0] != m) {
            return dim_err("concat_cols row mismatch");
        }
        let n: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let w = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(m, n, out, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [v, d] = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return dim_err(format!("row id {bad} out of range for table of {v} rows"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        self.push(ids.len(), d, out, Op::GatherRows { table, ids: ids.to_vec() }, ng, "gather_rows")
    }

    /// Summed negative log-likelihood of `targets[i]` under `softmax(logits[i])`.
    /// Rows whose target is `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let [m, n] = self.shape(logits);
        if targets.len() != m {
            return dim_err(format!("{} targets for {m} rows", targets.len()));
        }
        if n == 0 {
            return dim_err("cross_entropy over an empty vocabulary");
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= n) {
            return dim_err(format!("target {bad} out of range {n}"));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &lv[i * n..(i + 1) * n];
            softmax_into(row, &mut probs[i * n..(i + 1) * n]);
            if let Some(t) = targets[i] {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        let ng = self.needs(logits);
        self.push(1, 1, vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng, "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(1, 1, vec![s], Op::Sum(x), ng, "sum")
    }

    /// Backpropagates from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return dim_err(format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("backward".into()));
            }
            let (m, n) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = node.param {
                        let t = Tensor::from_vec(m, n, g).expect("leaf shape");
                        match out.by_param.get_mut(&id) {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                    *a += b;
                                }
                            }
                            None => {
                                out.by_param.insert(id, t);
                            }
                        }
                    }
                }
                &Op::MatMul { a, b, b_trans } => {
                    let k = self.shape(a)[1];
                    if self.needs(a) {
                        let bv = self.value(b);
                        let ga = self.grad_buf(&mut grads, a);
                        // dA = dC op(B)^T
                        gemm(m, n, k, &g, false, bv, !b_trans, ga, 1.0);
                    }
                    if self.needs(b) {
                        let av = self.value(a);
                        let gb = self.grad_buf(&mut grads, b);
                        if b_trans {
                            // dB = dC^T A, stored n x k
                            gemm(n, m, k, &g, true, av, false, gb, 1.0);
                        } else {
                            // dB = A^T dC, stored k x n
                            gemm(k, m, n, av, true, &g, false, gb, 1.0);
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.needs(v) {
                            axpy(self.grad_buf(&mut grads, v), &g, 1.0);
                        }
                    }
                }
                &Op::AddRow(a, bias) => {
                    if self.needs(a) {
                        axpy(self.grad_buf(&mut grads, a), &g, 1.0);
                    }
                    if self.needs(bias) {
                        let gb = self.grad_buf(&mut grads, bias);
                        for row in g.chunks(n.max(1)) {
                            axpy(gb, row, 1.0);
                        }
                    }
                }
                &Op::Scale(a, s) => {
                    if self.needs(a) {
                        axpy(self.grad_buf(&mut grads, a), &g, s);
                    }
                }
                &Op::ScaleVar(a, s) => {
                    if self.needs(a) {
                        let sv = self.scalar(s);
                        axpy(self.grad_buf(&mut grads, a), &g, sv);
                    }
                    if self.needs(s) {
                        let dot: f64 = g.iter().zip(self.value(a)).map(|(x, y)| x * y).sum();
                        self.grad_buf(&mut grads, s)[0] += dot;
                    }
                }
                &Op::Mul(a, b) => {
                    if self.needs(a) {
                        let bv = self.value(b);
                        let ga = self.grad_buf(&mut grads, a);
                        for ((d, gi), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += gi * y;
                        }
                    }
                    if self.needs(b) {
                        let av = self.value(a);
                        let gb = self.grad_buf(&mut grads, b);
                        for ((d, gi), x) in gb.iter_mut().zip(&g).zip(av) {
                            *d += gi * x;
                        }
                    }
                }
                &Op::Gelu(a) => {
                    let av = self.value(a);
                    let ga = self.grad_buf(&mut grads, a);
                    for ((d, gi), &x) in ga.iter_mut().zip(&g).zip(av) {
                        let u = GELU_C * (x + GELU_K * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *d += gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    if self.needs(gamma) {
                        let gg = self.grad_buf(&mut grads, gamma);
                        for i in 0..m {
                            for j in 0..n {
                                gg[j] += g[i * n + j] * xhat[i * n + j];
                            }
                        }
                    }
                    if self.needs(beta) {
                        let gb = self.grad_buf(&mut grads, beta);
                        for row in g.chunks(n) {
                            axpy(gb, row, 1.0);
                        }
                    }
                    if self.needs(x) {
                        let gam = self.value(gamma);
                        let gx = self.grad_buf(&mut grads, x);
                        let mut dxhat = vec![0.0; n];
                        for i in 0..m {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..n {
                                let d = g[i * n + j] * gam[j];
                                dxhat[j] = d;
                                mean_d += d;
                                mean_dx += d * xhat[i * n + j];
                            }
                            mean_d /= n as f64;
                            mean_dx /= n as f64;
                            for j in 0..n {
                                gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                            }
                        }
                    }
                }
                &Op::Softmax { x, causal } => {
                    let y = &node.value;
                    let gx = self.grad_buf(&mut grads, x);
                    for i in 0..m {
                        let width = if causal { i + 1 } else { n };
                        let yr = &y[i * n..i * n + width];
                        let gr = &g[i * n..i * n + width];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            gx[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                &Op::SliceCols { x, start } => {
                    let xn = self.shape(x)[1];
                    let gx = self.grad_buf(&mut grads, x);
                    for i in 0..m {
                        axpy(&mut gx[i * xn + start..i * xn + start + n], &g[i * n..(i + 1) * n], 1.0);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        if self.needs(p) {
                            let gp = self.grad_buf(&mut grads, p);
                            for i in 0..m {
                                axpy(&mut gp[i * w..(i + 1) * w], &g[i * n + offset..i * n + offset + w], 1.0);
                            }
                        }
                        offset += w;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let gt = self.grad_buf(&mut grads, *table);
                    for (i, &r) in ids.iter().enumerate() {
                        axpy(&mut gt[r * n..(r + 1) * n], &g[i * n..(i + 1) * n], 1.0);
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let vocab = self.shape(*logits)[1];
                    let scale = g[0];
                    let gl = self.grad_buf(&mut grads, *logits);
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..vocab {
                                gl[i * vocab + j] += scale * probs[i * vocab + j];
                            }
                            gl[i * vocab + t] -= scale;
                        }
                    }
                }
                &Op::Sum(x) => {
                    let gv = g[0];
                    for d in self.grad_buf(&mut grads, x).iter_mut() {
                        *d += gv;
                    }
                }
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

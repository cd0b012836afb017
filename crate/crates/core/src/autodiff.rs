// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and the
//! information its backward rule needs. Nodes are only ever appended, so the
//! tape is topologically ordered by construction and a single reverse sweep
//! from the loss visits each node after all of its consumers.

use crate::error::{Error, Result};
use crate::tensor::{self, dot, l2_norm, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Normalization epsilon shared by RMS and layer norm.
pub const NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        inv_std: Vec<f64>,
    },
    CausalSoftmax(Var),
    Rope {
        x: Var,
        n_heads: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    RowCosine {
        x: Var,
        anchor: usize,
        rows: Vec<usize>,
    },
    CosineSim(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    RotateRow {
        x: Var,
        row: usize,
        target: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The recording. Build a graph with the op methods, then call
/// [`Tape::backward`] once on a scalar.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
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

    /// Records a constant input. No gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf; its gradient is populated by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was
    /// reachable from the loss and depends on a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears all gradients so `backward` may be called again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Forward ops
    // -----------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push_op(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push_op(out, Op::Scale(a, c), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::silu);
        self.push_op(out, Op::Silu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push_op(out, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Per-row `x / sqrt(mean(x²) + ε) ⊙ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("rms_norm")?;
        if self.value(gain).numel() != d || d == 0 {
            return Err(Error::shape("rms_norm", "gain length must equal row width"));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let mut out = vec![0.0; n * d];
        let mut inv_rms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + NORM_EPS).sqrt();
            for j in 0..d {
                out[i * d + j] = row[j] * r * g[j];
            }
            inv_rms.push(r);
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push_op(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Mean-subtracting layer norm with learned gain and no bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("layer_norm")?;
        if self.value(gain).numel() != d || d == 0 {
            return Err(Error::shape("layer_norm", "gain length must equal row width"));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let mut out = vec![0.0; n * d];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mu) * s * g[j];
            }
            inv_std.push(s);
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push_op(out, Op::LayerNorm { x, gain, inv_std }, &[x, gain]))
    }

    /// Row-wise softmax over `j ≤ i`; entries above the diagonal are exactly 0.
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let (n, m) = self.value(scores).dims2("causal_softmax")?;
        if n != m {
            return Err(Error::shape("causal_softmax", format!("expected square, got {n}x{m}")));
        }
        let out = causal_softmax_values(self.value(scores));
        Ok(self.push_op(out, Op::CausalSoftmax(scores), &[scores]))
    }

    /// Rotary position encoding over `n_heads` contiguous column blocks,
    /// rotating column `m` with column `m + d_head/2` inside each block.
    /// Row `p` is treated as position `p`.
    pub fn rope(&mut self, x: Var, n_heads: usize, base: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2("rope")?;
        if n_heads == 0 || !d.is_multiple_of(n_heads) || !(d / n_heads).is_multiple_of(2) {
            return Err(Error::shape(
                "rope",
                format!("width {d} must split into {n_heads} heads of even size"),
            ));
        }
        let dh = d / n_heads;
        let half = dh / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for p in 0..n {
            for m in 0..half {
                let theta = (p as f64) * base.powf(-2.0 * m as f64 / dh as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for p in 0..n {
            for h in 0..n_heads {
                for m in 0..half {
                    let (c, s) = (cos[p * half + m], sin[p * half + m]);
                    let ia = p * d + h * dh + m;
                    let ib = ia + half;
                    out[ia] = xv[ia] * c - xv[ib] * s;
                    out[ib] = xv[ia] * s + xv[ib] * c;
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push_op(out, Op::Rope { x, n_heads, cos, sin }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2("slice_cols")?;
        if start + len > d {
            return Err(Error::shape("slice_cols", format!("{start}+{len} exceeds width {d}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![n, len], out)?;
        Ok(self.push_op(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.value(p).dims2("concat_cols")?.0,
            None => return Err(Error::shape("concat_cols", "no inputs")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![n, total], out)?;
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = match parts.first() {
            Some(&p) => self.value(p).dims2("concat_rows")?.1,
            None => return Err(Error::shape("concat_rows", "no inputs")),
        };
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != d {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, d], out)?;
        Ok(self.push_op(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Gathers rows by index (embedding lookup, sequence assembly).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2("select_rows")?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Index {
                    what: "select_rows",
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(self.value(x).row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push_op(out, Op::SelectRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Cosine similarity of each listed row with the `anchor` row, as a vector.
    /// Zero-norm rows give 0 with zero gradient.
    pub fn row_cosine(&mut self, x: Var, anchor: usize, rows: &[usize]) -> Result<Var> {
        let (n, _) = self.value(x).dims2("row_cosine")?;
        for &r in rows.iter().chain(std::iter::once(&anchor)) {
            if r >= n {
                return Err(Error::Index {
                    what: "row_cosine",
                    index: r,
                    len: n,
                });
            }
        }
        let xv = self.value(x);
        let out: Vec<f64> = rows
            .iter()
            .map(|&r| tensor::cosine(xv.row(r), xv.row(anchor)))
            .collect();
        let op = Op::RowCosine {
            x,
            anchor,
            rows: rows.to_vec(),
        };
        Ok(self.push_op(Tensor::vector(out), op, &[x]))
    }

    /// Differentiable cosine similarity of two equally long vectors.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (a, b) = (self.value(u), self.value(v));
        if a.numel() != b.numel() {
            return Err(Error::shape(
                "cosine_sim",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let c = tensor::cosine(a.data(), b.data());
        Ok(self.push_op(Tensor::scalar(c), Op::CosineSim(u, v), &[u, v]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != t || t == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{t} logit rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                len: v,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[y];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / t as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push_op(out, op, &[logits]))
    }

    /// Replaces row `row` by `‖x[row]‖ · x[target] / ‖x[target]‖`, leaving
    /// every other row untouched. `row == target` is the identity.
    pub fn rotate_row(&mut self, x: Var, row: usize, target: usize) -> Result<Var> {
        let (n, _) = self.value(x).dims2("rotate_row")?;
        for r in [row, target] {
            if r >= n {
                return Err(Error::Index {
                    what: "rotate_row",
                    index: r,
                    len: n,
                });
            }
        }
        let mut out = self.value(x).clone();
        if row != target {
            let nt = l2_norm(out.row(target));
            if nt == 0.0 {
                return Err(Error::contract(format!("cannot rotate toward zero-norm row {target}")));
            }
            let nr = l2_norm(out.row(row));
            let dir: Vec<f64> = out.row(target).iter().map(|v| v / nt).collect();
            for (o, u) in out.row_mut(row).iter_mut().zip(&dir) {
                *o = nr * u;
            }
        }
        Ok(self.push_op(out, Op::RotateRow { x, row, target }, &[x]))
    }

    // -----------------------------------------------------------------------
    // Backward
    // -----------------------------------------------------------------------

    /// Populates gradients of every node that depends on a trainable leaf.
    ///
    /// The loss must be a one-element tensor. A second call without
    /// [`Tape::reset_grads`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; call reset_grads first",
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, g.data());
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, contribution).expect("gradient shape"));
            }
        }
    }

    fn zeros_like(&self, v: Var) -> Vec<f64> {
        vec![0.0; self.value(v).numel()]
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        let out = &self.nodes[idx].value;
        let mut updates: Vec<(Var, Vec<f64>)> = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(g, bv.data(), &mut da, m, n, k);
                    updates.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(av.data(), g, &mut db, m, k, n);
                    updates.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.rows(), out.cols());
                updates.push((*a, tensor::transpose_raw(g, m, n)));
            }
            Op::Add(a, b) => {
                updates.push((*a, g.to_vec()));
                updates.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                updates.push((*a, g.to_vec()));
                updates.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                updates.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                updates.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
            }
            Op::Scale(a, c) => updates.push((*a, g.iter().map(|x| x * c).collect())),
            Op::Silu(a) => {
                let xv = self.value(*a).data();
                let d = xv
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| {
                        let s = tensor::sigmoid(x);
                        gi * (s + x * s * (1.0 - s))
                    })
                    .collect();
                updates.push((*a, d));
            }
            Op::Square(a) => {
                let xv = self.value(*a).data();
                updates.push((*a, xv.iter().zip(g).map(|(x, gi)| 2.0 * x * gi).collect()));
            }
            Op::Sum(a) => updates.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                updates.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                let n = inv_rms.len();
                let mut dx = self.zeros_like(*x);
                let mut dg = vec![0.0; d];
                for i in 0..n {
                    let r = inv_rms[i];
                    let row = &xv[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let mut s = 0.0;
                    for j in 0..d {
                        s += gv[j] * gr[j] * row[j];
                        dg[j] += gr[j] * row[j] * r;
                    }
                    let coef = r * r * r * s / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = r * gv[j] * gr[j] - coef * row[j];
                    }
                }
                updates.push((*x, dx));
                updates.push((*gain, dg));
            }
            Op::LayerNorm { x, gain, inv_std } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                let n = inv_std.len();
                let mut dx = self.zeros_like(*x);
                let mut dg = vec![0.0; d];
                for i in 0..n {
                    let s = inv_std[i];
                    let row = &xv[i * d..(i + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * s).collect();
                    let gr = &g[i * d..(i + 1) * d];
                    let dxhat: Vec<f64> = (0..d).map(|j| gr[j] * gv[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dot(&dxhat, &xhat) / d as f64;
                    for j in 0..d {
                        dg[j] += gr[j] * xhat[j];
                        dx[i * d + j] = s * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                updates.push((*x, dx));
                updates.push((*gain, dg));
            }
            Op::CausalSoftmax(a) => {
                let n = out.rows();
                let y = out.data();
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    let yr = &y[i * n..i * n + i + 1];
                    let gr = &g[i * n..i * n + i + 1];
                    let s = dot(yr, gr);
                    for j in 0..=i {
                        dx[i * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                updates.push((*a, dx));
            }
            Op::Rope { x, n_heads, cos, sin } => {
                let (n, d) = (out.rows(), out.cols());
                let dh = d / n_heads;
                let half = dh / 2;
                let mut dx = vec![0.0; n * d];
                for p in 0..n {
                    for h in 0..*n_heads {
                        for m in 0..half {
                            let (c, s) = (cos[p * half + m], sin[p * half + m]);
                            let ia = p * d + h * dh + m;
                            let ib = ia + half;
                            dx[ia] = g[ia] * c + g[ib] * s;
                            dx[ib] = -g[ia] * s + g[ib] * c;
                        }
                    }
                }
                updates.push((*x, dx));
            }
            Op::SliceCols { x, start } => {
                let (n, len) = (out.rows(), out.cols());
                let d = self.value(*x).cols();
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                updates.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    updates.push((p, dp));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    updates.push((p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::SelectRows { x, idx } => {
                let d = out.cols();
                let mut dx = self.zeros_like(*x);
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] += g[o * d + j];
                    }
                }
                updates.push((*x, dx));
            }
            Op::RowCosine { x, anchor, rows } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = self.zeros_like(*x);
                let v = xv.row(*anchor);
                for (o, &r) in rows.iter().enumerate() {
                    let u = xv.row(r);
                    if let Some((du, dv)) = cosine_grads(u, v, g[o]) {
                        for j in 0..d {
                            dx[r * d + j] += du[j];
                            dx[anchor * d + j] += dv[j];
                        }
                    }
                }
                updates.push((*x, dx));
            }
            Op::CosineSim(u, v) => {
                let (uv, vv) = (self.value(*u).data(), self.value(*v).data());
                let (du, dv) = cosine_grads(uv, vv, g[0]).unwrap_or_else(|| (vec![0.0; uv.len()], vec![0.0; vv.len()]));
                updates.push((*u, du));
                updates.push((*v, dv));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let t = targets.len();
                let v = probs.len() / t;
                let scale = g[0] / t as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in targets.iter().enumerate() {
                    dl[i * v + y] -= scale;
                }
                updates.push((*logits, dl));
            }
            Op::RotateRow { x, row, target } => {
                let mut dx = g.to_vec();
                if row != target {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let (xr, xt) = (xv.row(*row), xv.row(*target));
                    let (nr, nt) = (l2_norm(xr), l2_norm(xt));
                    let gr = &g[row * d..(row + 1) * d];
                    let u: Vec<f64> = xt.iter().map(|v| v / nt).collect();
                    let ug = dot(&u, gr);
                    for j in 0..d {
                        dx[row * d + j] = if nr > 0.0 { ug * xr[j] / nr } else { 0.0 };
                        dx[target * d + j] += nr / nt * (gr[j] - u[j] * ug);
                    }
                }
                updates.push((*x, dx));
            }
        }
        for (v, contribution) in updates {
            self.acc(v, contribution);
        }
    }
}

/// `(∂c/∂u, ∂c/∂v)` scaled by upstream `g`, or `None` when an operand has
/// zero norm (the similarity is then the constant 0).
fn cosine_grads(u: &[f64], v: &[f64], g: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    let c = dot(u, v) / (nu * nv);
    let inv = 1.0 / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(a, b)| g * (b * inv - c * a / (nu * nu)))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(a, b)| g * (a * inv - c * b / (nv * nv)))
        .collect();
    Some((du, dv))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Masked softmax values; the mask is an additive −∞ above the diagonal,
/// realized by never exponentiating those entries.
pub(crate) fn causal_softmax_values(scores: &Tensor) -> Tensor {
    let n = scores.rows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &scores.row(i)[..=i];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..=i {
            let e = (row[j] - mx).exp();
            out[i * n + j] = e;
            z += e;
        }
        for v in &mut out[i * n..i * n + i + 1] {
            *v /= z;
        }
    }
    Tensor::new(vec![n, n], out).expect("square")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn causal_softmax_uniform_logits() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[3, 3]));
        let a = tape.causal_softmax(s).unwrap();
        let v = tape.value(a);
        let third = 1.0 / 3.0;
        let expected = [1.0, 0.0, 0.0, 0.5, 0.5, 0.0, third, third, third];
        for (x, e) in v.data().iter().zip(expected) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_softmax_rejects_rectangular() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.causal_softmax(s).is_err());
    }

    #[test]
    fn causal_softmax_shift_invariant() {
        let mut tape = Tape::new();
        let base = m(&[&[0.3, 1.0, -2.0], &[1.5, -0.5, 0.2], &[0.1, 0.7, 2.0]]);
        let mut shifted = base.clone();
        for j in 0..3 {
            let v = shifted.get(1, j);
            shifted.set(1, j, v + 17.0);
        }
        let a = tape.constant(base);
        let b = tape.constant(shifted);
        let sa = tape.causal_softmax(a).unwrap();
        let sb = tape.causal_softmax(b).unwrap();
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn rms_norm_constant_and_zero_rows() {
        let mut tape = Tape::new();
        let h = tape.constant(m(&[&[2.0, 2.0, 2.0, 2.0], &[0.0, 0.0, 0.0, 0.0]]));
        let g = tape.constant(Tensor::filled(&[4], 1.0));
        let y = tape.rms_norm(h, g).unwrap();
        let v = tape.value(y);
        for j in 0..4 {
            assert!((v.get(0, j) - 1.0).abs() < 1e-6);
            assert_eq!(v.get(1, j), 0.0);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, 8]));
        let ce = tape.cross_entropy(l, &[0, 3, 7]).unwrap();
        assert!((tape.value(ce).item() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_margin_goes_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut tape = Tape::new();
            let mut logits = Tensor::zeros(&[1, 4]);
            logits.set(0, 2, margin);
            let l = tape.constant(logits);
            let ce = tape.cross_entropy(l, &[2]).unwrap();
            let ce = tape.value(ce).item();
            assert!(ce < prev);
            prev = ce;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(tape.cross_entropy(l, &[4]), Err(Error::Index { .. })));
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[1.0, -2.0, 3.0]]));
        let w = tape.param(Tensor::filled(&[3, 2], 0.5));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, -2.0, -2.0, 3.0, 3.0]);
    }

    #[test]
    fn disconnected_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let s = tape.square(a);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert!(tape.grad(b).is_none());
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_contracts() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
        let loss = tape.sum(a);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
        tape.reset_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn cosine_special_cases() {
        let mut tape = Tape::new();
        let u = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let w = tape.param(Tensor::vector(vec![-2.0, 1.0, 0.0]));
        let z = tape.param(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let scaled = tape.scale(u, 3.5);
        let c_self = tape.cosine_sim(u, scaled).unwrap();
        let c_orth = tape.cosine_sim(u, w).unwrap();
        let c_zero = tape.cosine_sim(u, z).unwrap();
        assert!((tape.value(c_self).item() - 1.0).abs() < 1e-15);
        assert_eq!(tape.value(c_orth).item(), 0.0);
        assert_eq!(tape.value(c_zero).item(), 0.0);
        tape.backward(c_zero).unwrap();
        assert!(tape.grad(u).unwrap().data().iter().all(|&g| g == 0.0));
        assert!(tape.grad(z).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rotate_row_to_self_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[0.1, 0.2], &[0.3, -0.7]]));
        let y = tape.rotate_row(x, 1, 1).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn rotate_row_rejects_zero_target() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[0.0, 0.0], &[0.3, -0.7]]));
        assert!(tape.rotate_row(x, 1, 0).is_err());
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] walks the node list once in
//! reverse. Operations return lightweight [`Var`] handles; values live in the
//! graph until it is dropped.
//!
//! Nodes only carry gradient bookkeeping when some input requires a gradient.
//! [`Graph::stop_gradient`] produces a node that never does, which is how the
//! implicit targets are frozen.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, dot, last_dim, matmul_nn, matmul_nt, matmul_tn, numel, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Epsilon inside the RMS normalization square root.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn node_id(self) -> usize {
        self.index
    }
}

/// Head layout for [`Graph::causal_attention`]. Rows of the inputs are
/// `batch × seq_len` positions stored sequence after sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub seq_len: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64 },
    Silu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    RmsNorm { x: usize, gain: usize, inv_rms: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    CosineRows { a: usize, b: usize, norm_a: Vec<f64>, norm_b: Vec<f64> },
    SmoothL1 { x: usize, beta: f64 },
    Sum(usize),
    Mean(usize),
    StopGradient,
    GatherRows { x: usize, idx: Vec<usize> },
    ScatterAddRows { x: usize, idx: Vec<usize> },
    ScaleRows { x: usize, s: usize },
    Column { x: usize, col: usize },
    TopKSoftmax { x: usize, selected: Vec<bool> },
    CausalAttention { q: usize, k: usize, v: usize, shape: AttentionShape, probs: Vec<f64> },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(v.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Adds a leaf holding a copy of `t`; it tracks gradients iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.index].shape
    }

    /// Detached copy of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.index];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.index].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn rows_cols(&self, i: usize) -> (usize, usize) {
        let s = &self.nodes[i].shape;
        let c = last_dim(s);
        (self.nodes[i].value.len() / c, c)
    }

    fn expect_matrix(&self, op: &'static str, i: usize) -> Result<(usize, usize)> {
        let s = &self.nodes[i].shape;
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.clone(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::Shape {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    fn check_finite(&self, op: &'static str, i: usize) -> Result<()> {
        if self.nodes[i].value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.to_string()));
        }
        Ok(())
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.expect_matrix("matmul", ai)?;
        let (k2, n) = self.expect_matrix("matmul", bi)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.nodes[ai].value, &self.nodes[bi].value, &mut out, m, k, n);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: ai, b: bi, m, k, n }, rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.expect_matrix("matmul_nt", ai)?;
        let (n, k2) = self.expect_matrix("matmul_nt", bi)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(&self.nodes[ai].value, &self.nodes[bi].value, &mut out, m, k, n);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a: ai, b: bi, m, k, n }, rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<f64>)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(op, ai, bi)?;
        let out = self.nodes[ai]
            .value
            .iter()
            .zip(&self.nodes[bi].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((ai, bi, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(self.nodes[ai].shape.clone(), out, Op::Add(ai, bi), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(self.nodes[ai].shape.clone(), out, Op::Sub(ai, bi), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(self.nodes[ai].shape.clone(), out, Op::Mul(ai, bi), rg))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.iter().map(|v| scale * v + shift).collect();
        Ok(self.push(self.nodes[xi].shape.clone(), out, Op::Affine { x: xi, scale }, self.rg(xi)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// `t · sigmoid(t)`, elementwise.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.iter().map(|&t| t * sigmoid(t)).collect();
        Ok(self.push(self.nodes[xi].shape.clone(), out, Op::Silu(xi), self.rg(xi)))
    }

    /// `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`
    pub fn swiglu(&mut self, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
        let gate = self.matmul(x, w_gate)?;
        let gate = self.silu(gate)?;
        let up = self.matmul(x, w_up)?;
        let hidden = self.mul(gate, up)?;
        self.matmul(hidden, w_down)
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        self.check_finite("softmax", xi)?;
        let (_, c) = self.rows_cols(xi);
        let mut out = self.nodes[xi].value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(self.nodes[xi].shape.clone(), out, Op::Softmax(xi), self.rg(xi)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        self.check_finite("log_softmax", xi)?;
        let (_, c) = self.rows_cols(xi);
        let mut out = self.nodes[xi].value.clone();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(self.nodes[xi].shape.clone(), out, Op::LogSoftmax(xi), self.rg(xi)))
    }

    /// `x · gain / sqrt(mean(x²) + ε)` per row.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xi, gi) = (self.idx(x)?, self.idx(gain)?);
        let (rows, d) = self.rows_cols(xi);
        if self.nodes[gi].value.len() != d {
            return Err(Error::Shape {
                op: "rmsnorm",
                lhs: self.nodes[xi].shape.clone(),
                rhs: self.nodes[gi].shape.clone(),
            });
        }
        let xv = &self.nodes[xi].value;
        let gv = &self.nodes[gi].value;
        let mut out = vec![0.0; xv.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let inv = 1.0 / (dot(row, row) / d as f64 + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * gv[j];
            }
        }
        let rg = self.rg(xi) || self.rg(gi);
        Ok(self.push(self.nodes[xi].shape.clone(), out, Op::RmsNorm { x: xi, gain: gi, inv_rms }, rg))
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    /// `mask[t] == true` keeps position `t`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let li = self.idx(logits)?;
        let (rows, v) = self.expect_matrix("cross_entropy", li)?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![rows, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        self.check_finite("cross_entropy", li)?;
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let w = 1.0 / count as f64;
        let lv = &self.nodes[li].value;
        let mut probs = vec![0.0; rows * v];
        let mut weights = vec![0.0; rows];
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &lv[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            total += lse - row[t];
            weights[r] = w;
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let op = Op::CrossEntropy {
            logits: li,
            targets: targets.to_vec(),
            weights,
            probs,
        };
        let rg = self.rg(li);
        Ok(self.push(Vec::new(), vec![total * w], op, rg))
    }

    /// Row-wise cosine similarity of two `[N×d]` tensors, giving `[N]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("cosine_rows", ai, bi)?;
        let (rows, d) = self.rows_cols(ai);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let mut out = Vec::with_capacity(rows);
        let mut norm_a = Vec::with_capacity(rows);
        let mut norm_b = Vec::with_capacity(rows);
        for r in 0..rows {
            let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
            let (nx, ny) = (tensor::norm(x), tensor::norm(y));
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::DegenerateVector("cosine similarity"));
            }
            out.push(dot(x, y) / (nx * ny));
            norm_a.push(nx);
            norm_b.push(ny);
        }
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(vec![rows], out, Op::CosineRows { a: ai, b: bi, norm_a, norm_b }, rg))
    }

    /// Cosine similarity of two vectors as a scalar node.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.cosine_rows(a, b)?;
        if self.value(c).len() != 1 {
            return Err(Error::Shape {
                op: "cosine_similarity",
                lhs: self.shape(a).to_vec(),
                rhs: vec![1],
            });
        }
        self.reshape(c, Vec::new())
    }

    /// Elementwise Huber penalty with transition point `beta`.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi]
            .value
            .iter()
            .map(|&t| {
                if t.abs() < beta {
                    0.5 * t * t / beta
                } else {
                    t.abs() - 0.5 * beta
                }
            })
            .collect();
        Ok(self.push(self.nodes[xi].shape.clone(), out, Op::SmoothL1 { x: xi, beta }, self.rg(xi)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.iter().sum();
        Ok(self.push(Vec::new(), vec![s], Op::Sum(xi), self.rg(xi)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Vec::new(), vec![s], Op::Mean(xi), self.rg(xi)))
    }

    /// Forward identity; backward contributes nothing to `x` or its
    /// ancestors.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = &self.nodes[xi];
        Ok(self.push(n.shape.clone(), n.value.clone(), Op::StopGradient, false))
    }

    /// Rows `idx` of `x` (viewed as `[rows, cols]`), also used for embedding
    /// lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let (rows, c) = self.rows_cols(xi);
        let xv = &self.nodes[xi].value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let op = Op::GatherRows { x: xi, idx: idx.to_vec() };
        Ok(self.push(vec![idx.len(), c], out, op, self.rg(xi)))
    }

    /// Inverse of [`Graph::gather_rows`]: row `r` of `x` is added into row
    /// `idx[r]` of a zero `[out_rows, cols]` tensor.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (rows, c) = self.rows_cols(xi);
        if idx.len() != rows {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: vec![rows, c],
                rhs: vec![idx.len()],
            });
        }
        let xv = &self.nodes[xi].value;
        let mut out = vec![0.0; out_rows * c];
        for (r, &i) in idx.iter().enumerate() {
            if i >= out_rows {
                return Err(Error::Index {
                    op: "scatter_add_rows",
                    index: i,
                    bound: out_rows,
                });
            }
            for j in 0..c {
                out[i * c + j] += xv[r * c + j];
            }
        }
        let op = Op::ScatterAddRows { x: xi, idx: idx.to_vec() };
        Ok(self.push(vec![out_rows, c], out, op, self.rg(xi)))
    }

    /// `out[r, :] = x[r, :] · s[r]` for `x: [N×c]`, `s: [N]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.idx(x)?, self.idx(s)?);
        let (rows, c) = self.rows_cols(xi);
        if self.nodes[si].value.len() != rows {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: self.nodes[xi].shape.clone(),
                rhs: self.nodes[si].shape.clone(),
            });
        }
        let (xv, sv) = (&self.nodes[xi].value, &self.nodes[si].value);
        let out = (0..rows * c).map(|p| xv[p] * sv[p / c]).collect();
        let rg = self.rg(xi) || self.rg(si);
        Ok(self.push(vec![rows, c], out, Op::ScaleRows { x: xi, s: si }, rg))
    }

    /// Column `col` of a matrix, as `[rows]`.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (rows, c) = self.rows_cols(xi);
        if col >= c {
            return Err(Error::Index {
                op: "column",
                index: col,
                bound: c,
            });
        }
        let out = (0..rows).map(|r| self.nodes[xi].value[r * c + col]).collect();
        Ok(self.push(vec![rows], out, Op::Column { x: xi, col }, self.rg(xi)))
    }

    /// Per row: softmax over the `k` largest entries, zero elsewhere. Ties go
    /// to the lower index.
    pub fn topk_softmax(&mut self, x: Var, k: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        self.check_finite("topk_softmax", xi)?;
        let (rows, e) = self.rows_cols(xi);
        if k == 0 || k > e {
            return Err(Error::config(format!("top-k routing needs 1 <= k <= {e}, got k = {k}")));
        }
        let xv = &self.nodes[xi].value;
        let mut out = vec![0.0; rows * e];
        let mut selected = vec![false; rows * e];
        for r in 0..rows {
            let row = &xv[r * e..(r + 1) * e];
            let top = top_k_indices(row, k);
            let max = top.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = top.iter().map(|&j| (row[j] - max).exp()).sum();
            for &j in &top {
                out[r * e + j] = (row[j] - max).exp() / z;
                selected[r * e + j] = true;
            }
        }
        Ok(self.push(vec![rows, e], out, Op::TopKSoftmax { x: xi, selected }, self.rg(xi)))
    }

    /// Causal scaled dot-product attention with grouped key/value heads.
    ///
    /// `q: [N × Hq·hd]`, `k, v: [N × Hkv·hd]`; query head `h` reads kv head
    /// `h / (Hq / Hkv)`. Position `t` of a sequence attends to positions
    /// `0..=t` of the same sequence only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let (qi, ki, vi) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let AttentionShape {
            seq_len: t_len,
            num_q_heads: hq,
            num_kv_heads: hkv,
            head_dim: hd,
        } = shape;
        if hkv == 0 || hq % hkv != 0 {
            return Err(Error::config("query heads must be a multiple of kv heads"));
        }
        let (n, qc) = self.expect_matrix("causal_attention", qi)?;
        let (nk, kc) = self.expect_matrix("causal_attention", ki)?;
        self.same_shape("causal_attention", ki, vi)?;
        if qc != hq * hd || kc != hkv * hd || nk != n || t_len == 0 || n % t_len != 0 {
            return Err(Error::Shape {
                op: "causal_attention",
                lhs: vec![n, qc],
                rhs: vec![nk, kc],
            });
        }
        let batch = n / t_len;
        let group = hq / hkv;
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[qi].value, &self.nodes[ki].value, &self.nodes[vi].value);
        let mut out = vec![0.0; n * qc];
        let mut probs = vec![0.0; batch * hq * t_len * t_len];
        let mut scores = vec![0.0; t_len];
        for b in 0..batch {
            for h in 0..hq {
                let g = h / group;
                for i in 0..t_len {
                    let qrow = &qv[(b * t_len + i) * qc + h * hd..][..hd];
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let krow = &kv[(b * t_len + j) * kc + g * hd..][..hd];
                        *s = dot(qrow, krow) * inv_sqrt;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    let pbase = ((b * hq + h) * t_len + i) * t_len;
                    probs[pbase..pbase + i + 1].copy_from_slice(&scores[..=i]);
                    let orow = &mut out[(b * t_len + i) * qc + h * hd..][..hd];
                    for (j, &p) in scores.iter().enumerate().take(i + 1) {
                        let vrow = &vv[(b * t_len + j) * kc + g * hd..][..hd];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(qi) || self.rg(ki) || self.rg(vi);
        let op = Op::CausalAttention {
            q: qi,
            k: ki,
            v: vi,
            shape,
            probs,
        };
        Ok(self.push(vec![n, qc], out, op, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xi = self.idx(x)?;
        if numel(&shape) != self.nodes[xi].value.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.nodes[xi].shape.clone(),
                rhs: shape,
            });
        }
        let value = self.nodes[xi].value.clone();
        Ok(self.push(shape, value, Op::Reshape(xi), self.rg(xi)))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    ///
    /// The graph can be differentiated once; call [`Graph::reset_grads`]
    /// before running backward again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[li].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[li].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[li].requires_grad {
            grads[li] = Some(vec![1.0]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Clears gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    /// Gradient of the last backward pass, `None` if the node was not reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the node was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.index];
        let data = self.grad(v).map_or_else(|| vec![0.0; n.value.len()], <[f64]>::to_vec);
        Tensor::new(n.shape.clone(), data).expect("grad shape matches value")
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    matmul_nt(g, &self.nodes[b].value, acc(grads, a, m * k), m, n, k);
                }
                if self.rg(b) {
                    matmul_tn(&self.nodes[a].value, g, acc(grads, b, k * n), m, k, n);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if self.rg(a) {
                    matmul_nn(g, &self.nodes[b].value, acc(grads, a, m * k), m, n, k);
                }
                if self.rg(b) {
                    matmul_tn(g, &self.nodes[a].value, acc(grads, b, n * k), m, n, k);
                }
            }
            &Op::Add(a, b) => {
                for (x, sign) in [(a, 1.0), (b, 1.0)] {
                    if self.rg(x) {
                        axpy(acc(grads, x, g.len()), sign, g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (x, sign) in [(a, 1.0), (b, -1.0)] {
                    if self.rg(x) {
                        axpy(acc(grads, x, g.len()), sign, g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let other = &self.nodes[b].value;
                    for ((d, &gv), &o) in acc(grads, a, g.len()).iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
                if self.rg(b) {
                    let other = &self.nodes[a].value;
                    for ((d, &gv), &o) in acc(grads, b, g.len()).iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if self.rg(x) {
                    axpy(acc(grads, x, g.len()), scale, g);
                }
            }
            &Op::Silu(x) => {
                if self.rg(x) {
                    let xv = &self.nodes[x].value;
                    for ((d, &gv), &t) in acc(grads, x, g.len()).iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(t);
                        *d += gv * (s + t * s * (1.0 - s));
                    }
                }
            }
            &Op::Softmax(x) => {
                if self.rg(x) {
                    let c = last_dim(&node.shape);
                    let dx = acc(grads, x, g.len());
                    for ((y, gr), d) in node.value.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        let s = dot(y, gr);
                        for j in 0..c {
                            d[j] += y[j] * (gr[j] - s);
                        }
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                if self.rg(x) {
                    let c = last_dim(&node.shape);
                    let dx = acc(grads, x, g.len());
                    for ((y, gr), d) in node.value.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            d[j] += gr[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let d = last_dim(&node.shape);
                let xv = &self.nodes[x].value;
                let gv = &self.nodes[gain].value;
                if self.rg(gain) {
                    let dg = acc(grads, gain, d);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xv[r * d + j] * inv;
                        }
                    }
                }
                if self.rg(x) {
                    let dx = acc(grads, x, xv.len());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let proj: f64 = (0..d).map(|j| gr[j] * gv[j] * row[j]).sum();
                        let coef = inv * inv * inv * proj / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += inv * gv[j] * gr[j] - coef * row[j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let logits = *logits;
                if self.rg(logits) {
                    let v = probs.len() / targets.len();
                    let dl = acc(grads, logits, probs.len());
                    for (r, (&w, &t)) in weights.iter().zip(targets).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w;
                        for j in 0..v {
                            dl[r * v + j] += scale * probs[r * v + j];
                        }
                        dl[r * v + t] -= scale;
                    }
                }
            }
            Op::CosineRows { a, b, norm_a, norm_b } => {
                let (a, b) = (*a, *b);
                let d = last_dim(&self.nodes[a].shape);
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                for (this, tv, ov, nt, no) in [(a, av, bv, norm_a, norm_b), (b, bv, av, norm_b, norm_a)] {
                    if !self.rg(this) {
                        continue;
                    }
                    let dst = acc(grads, this, tv.len());
                    for r in 0..g.len() {
                        let c = node.value[r];
                        let (x, y) = (&tv[r * d..(r + 1) * d], &ov[r * d..(r + 1) * d]);
                        let inv = 1.0 / (nt[r] * no[r]);
                        let inv_sq = c / (nt[r] * nt[r]);
                        for j in 0..d {
                            dst[r * d + j] += g[r] * (y[j] * inv - x[j] * inv_sq);
                        }
                    }
                }
            }
            &Op::SmoothL1 { x, beta } => {
                if self.rg(x) {
                    let xv = &self.nodes[x].value;
                    for ((d, &gv), &t) in acc(grads, x, g.len()).iter_mut().zip(g).zip(xv) {
                        let slope = if t.abs() < beta { t / beta } else { t.signum() };
                        *d += gv * slope;
                    }
                }
            }
            &Op::Sum(x) => {
                if self.rg(x) {
                    let n = self.nodes[x].value.len();
                    acc(grads, x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if self.rg(x) {
                    let n = self.nodes[x].value.len();
                    let s = g[0] / n as f64;
                    acc(grads, x, n).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                if self.rg(x) {
                    let c = last_dim(&node.shape);
                    let dx = acc(grads, x, self.nodes[x].value.len());
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut dx[i * c..(i + 1) * c], 1.0, &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::ScatterAddRows { x, idx } => {
                let x = *x;
                if self.rg(x) {
                    let c = last_dim(&node.shape);
                    let dx = acc(grads, x, idx.len() * c);
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut dx[r * c..(r + 1) * c], 1.0, &g[i * c..(i + 1) * c]);
                    }
                }
            }
            &Op::ScaleRows { x, s } => {
                let c = last_dim(&node.shape);
                let (xv, sv) = (&self.nodes[x].value, &self.nodes[s].value);
                if self.rg(x) {
                    let dx = acc(grads, x, xv.len());
                    for (p, d) in dx.iter_mut().enumerate() {
                        *d += g[p] * sv[p / c];
                    }
                }
                if self.rg(s) {
                    let ds = acc(grads, s, sv.len());
                    for (r, d) in ds.iter_mut().enumerate() {
                        *d += dot(&g[r * c..(r + 1) * c], &xv[r * c..(r + 1) * c]);
                    }
                }
            }
            &Op::Column { x, col } => {
                if self.rg(x) {
                    let c = last_dim(&self.nodes[x].shape);
                    let dx = acc(grads, x, self.nodes[x].value.len());
                    for (r, &gv) in g.iter().enumerate() {
                        dx[r * c + col] += gv;
                    }
                }
            }
            Op::TopKSoftmax { x, selected } => {
                let x = *x;
                if self.rg(x) {
                    let e = last_dim(&node.shape);
                    let dx = acc(grads, x, node.value.len());
                    for r in 0..node.value.len() / e {
                        let y = &node.value[r * e..(r + 1) * e];
                        let gr = &g[r * e..(r + 1) * e];
                        let sel = &selected[r * e..(r + 1) * e];
                        let s: f64 = (0..e).filter(|&j| sel[j]).map(|j| y[j] * gr[j]).sum();
                        for j in 0..e {
                            if sel[j] {
                                dx[r * e + j] += y[j] * (gr[j] - s);
                            }
                        }
                    }
                }
            }
            Op::CausalAttention { q, k, v, shape, probs } => {
                self.backprop_attention(*q, *k, *v, *shape, probs, g, grads);
            }
            &Op::Reshape(x) => {
                if self.rg(x) {
                    axpy(acc(grads, x, g.len()), 1.0, g);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        qi: usize,
        ki: usize,
        vi: usize,
        shape: AttentionShape,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttentionShape {
            seq_len: t_len,
            num_q_heads: hq,
            num_kv_heads: hkv,
            head_dim: hd,
        } = shape;
        let qc = hq * hd;
        let kc = hkv * hd;
        let n = g.len() / qc;
        let batch = n / t_len;
        let group = hq / hkv;
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[qi].value, &self.nodes[ki].value, &self.nodes[vi].value);
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; t_len];
        for b in 0..batch {
            for h in 0..hq {
                let gh = h / group;
                for i in 0..t_len {
                    let pbase = ((b * hq + h) * t_len + i) * t_len;
                    let p = &probs[pbase..pbase + i + 1];
                    let grow = &g[(b * t_len + i) * qc + h * hd..][..hd];
                    for j in 0..=i {
                        let voff = (b * t_len + j) * kc + gh * hd;
                        dp[j] = dot(grow, &vv[voff..voff + hd]);
                        axpy(&mut dv[voff..voff + hd], p[j], grow);
                    }
                    let s: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
                    let qoff = (b * t_len + i) * qc + h * hd;
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - s) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        let koff = (b * t_len + j) * kc + gh * hd;
                        axpy(&mut dq[qoff..qoff + hd], ds, &kv[koff..koff + hd]);
                        axpy(&mut dk[koff..koff + hd], ds, &qv[qoff..qoff + hd]);
                    }
                }
            }
        }
        for (idx, d) in [(qi, dq), (ki, dk), (vi, dv)] {
            if self.rg(idx) {
                axpy(acc(grads, idx, d.len()), 1.0, &d);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Indices of the `k` largest entries, largest first; ties go to the lower
/// index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

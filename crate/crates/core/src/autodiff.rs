//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order. [`Tape::backward`] walks it once in reverse and returns
//! [`Gradients`]; a second call on the same tape is an error. Parameters are
//! registered by name so their gradients can be routed back into the owning
//! module with [`Gradients::named`].
//!
//! Batched operations use a leading group axis: `[G, n, d]` tensors hold `G`
//! independent `n×d` matrices (one per sample, or one per sample and head).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::special;
use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

#[derive(Debug)]
struct LrsaCache {
    active: Vec<bool>,
    q_frob: Vec<f64>,
    x_maxnorm: Vec<f64>,
    x_argmax: Vec<usize>,
    denom: Vec<f64>,
    floored: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    AddBroadcast { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Gelu { a: usize },
    Cos { a: usize },
    SoftmaxRows { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape { a: usize },
    SplitHeads { a: usize, heads: usize },
    MergeHeads { a: usize, heads: usize },
    PrependRow { a: usize, row: usize },
    SelectRow { a: usize, index: usize },
    PairwiseSqDist { q: usize, k: usize, active: Vec<bool> },
    LrsaScores { q: usize, k: usize, x: usize, alpha: f64, heads: usize, cache: LrsaCache },
    Sum { a: usize },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    names: BTreeMap<String, usize>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            names: BTreeMap::new(),
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
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::DetachedTape);
        }
        Ok(v.id)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let value = value.detached();
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a named parameter; it is differentiable iff the tensor's
    /// `requires_grad` flag is set.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        let v = self.leaf(value.detached(), value.requires_grad())?;
        if value.requires_grad() {
            self.names.insert(name.to_string(), v.id);
        }
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    // -- operations --------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).matmul(self.val(ib))?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("matmul", out, Op::MatMul { a: ia, b: ib }, rg)
    }

    /// `[G,m,k] × [G,k,n] → [G,m,n]`, or `[G,m,k] × [G,n,k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        let bad = Error::shape("batch_matmul", sa, sb);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad);
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad);
        }
        let (av, bv) = (self.val(ia).data(), self.val(ib).data());
        let mut out = vec![0.0; g * m * n];
        for grp in 0..g {
            let a_s = &av[grp * m * k..(grp + 1) * m * k];
            let b_s = &bv[grp * k * n..(grp + 1) * k * n];
            let o_s = &mut out[grp * m * n..(grp + 1) * m * n];
            if trans_b {
                gemm_bt(a_s, b_s, o_s, m, k, n);
            } else {
                gemm(a_s, b_s, o_s, m, k, n);
            }
        }
        let rg = self.rg(ia) || self.rg(ib);
        let value = Tensor::from_parts(vec![g, m, n], out);
        self.push("batch_matmul", value, Op::BatchMatMul { a: ia, b: ib, trans_b }, rg)
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(Error::shape(op, self.val(ia).shape(), self.val(ib).shape()));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(name, ia, ib)?;
        let (x, y) = (self.val(ia), self.val(ib));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok((ia, ib, Tensor::from_parts(x.shape().to_vec(), data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip("add", a, b, |p, q| p + q)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("add", out, Op::Add { a: ia, b: ib }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("sub", out, Op::Sub { a: ia, b: ib }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("mul", out, Op::Mul { a: ia, b: ib }, rg)
    }

    /// Adds `b` to every trailing block of `a`: `b`'s shape must equal the
    /// trailing axes of `a` (bias rows, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bv = self.val(ib).data();
        let p = bv.len();
        let mut out = self.val(ia).data().to_vec();
        for chunk in out.chunks_mut(p) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o += v;
            }
        }
        let value = Tensor::from_parts(sa.to_vec(), out);
        let rg = self.rg(ia) || self.rg(ib);
        self.push("add_broadcast", value, Op::AddBroadcast { a: ia, b: ib }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).scale(c);
        let rg = self.rg(ia);
        self.push("scale", out, Op::Scale { a: ia, c }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(special::gelu);
        let rg = self.rg(ia);
        self.push("gelu", out, Op::Gelu { a: ia }, rg)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(libm::cos);
        let rg = self.rg(ia);
        self.push("cos", out, Op::Cos { a: ia }, rg)
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let mut out = x.data().to_vec();
        softmax_rows_inplace(&mut out, x.last_dim());
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.rg(ia);
        self.push("softmax_rows", value, Op::SoftmaxRows { a: ia }, rg)
    }

    /// LayerNorm over the last axis with biased variance and `eps` inside
    /// the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xs = self.val(ix).shape();
        let n = *xs.last().unwrap();
        for i in [ig, ib] {
            if self.val(i).shape() != [n] {
                return Err(Error::shape("layer_norm", xs, self.val(i).shape()));
            }
        }
        let (g, b) = (self.val(ig).data(), self.val(ib).data());
        let xv = self.val(ix).data();
        let rows = xv.len() / n;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(xs.to_vec(), out);
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        let op = Op::LayerNorm { x: ix, gamma: ig, beta: ib, xhat, inv_std };
        self.push("layer_norm", value, op, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).reshape(shape)?;
        let rg = self.rg(ia);
        self.push("reshape", out, Op::Reshape { a: ia }, rg)
    }

    /// `[B, T, H·dk] → [B·H, T, dk]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).shape();
        if s.len() != 3 || s[2] % heads != 0 {
            return Err(Error::invalid_shape("split_heads", s, format!("last axis not divisible by {heads} heads")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let out = permute_heads(self.val(ia).data(), b, t, d, heads, true);
        let value = Tensor::from_parts(vec![b * heads, t, d / heads], out);
        let rg = self.rg(ia);
        self.push("split_heads", value, Op::SplitHeads { a: ia, heads }, rg)
    }

    /// `[B·H, T, dk] → [B, T, H·dk]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).shape();
        if s.len() != 3 || s[0] % heads != 0 {
            return Err(Error::invalid_shape("merge_heads", s, format!("group axis not divisible by {heads} heads")));
        }
        let (b, t, d) = (s[0] / heads, s[1], s[2] * heads);
        let out = permute_heads(self.val(ia).data(), b, t, d, heads, false);
        let value = Tensor::from_parts(vec![b, t, d], out);
        let rg = self.rg(ia);
        self.push("merge_heads", value, Op::MergeHeads { a: ia, heads }, rg)
    }

    /// Prepends the vector `row` (`[d]`) to every sequence of `a` (`[B,T,d]`).
    pub fn prepend_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let (s, sr) = (self.val(ia).shape(), self.val(ir).shape());
        if s.len() != 3 || sr != [s[2]] {
            return Err(Error::shape("prepend_row", s, sr));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let (av, rv) = (self.val(ia).data(), self.val(ir).data());
        let mut out = Vec::with_capacity(b * (t + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(rv);
            out.extend_from_slice(&av[bi * t * d..(bi + 1) * t * d]);
        }
        let value = Tensor::from_parts(vec![b, t + 1, d], out);
        let rg = self.rg(ia) || self.rg(ir);
        self.push("prepend_row", value, Op::PrependRow { a: ia, row: ir }, rg)
    }

    /// Picks token `index` of every sequence: `[B,T,d] → [B,d]`.
    pub fn select_row(&mut self, a: Var, index: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).shape();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::invalid_shape("select_row", s, format!("cannot select token {index}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let av = self.val(ia).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * t + index) * d;
            out.extend_from_slice(&av[off..off + d]);
        }
        let value = Tensor::from_parts(vec![b, d], out);
        let rg = self.rg(ia);
        self.push("select_row", value, Op::SelectRow { a: ia, index }, rg)
    }

    /// Squared Euclidean distances between the rows of `q` (`[G,n,d]`) and
    /// `k` (`[G,m,d]`), evaluated in matrix form and clamped at zero.
    pub fn pairwise_sq_dist(&mut self, q: Var, k: Var) -> Result<Var> {
        let (iq, ik) = (self.idx(q)?, self.idx(k)?);
        let (sq, sk) = (self.val(iq).shape(), self.val(ik).shape());
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape("pairwise_sq_dist", sq, sk));
        }
        let (g, n, m, d) = (sq[0], sq[1], sk[1], sq[2]);
        let (dist, active) = pairwise_forward(self.val(iq).data(), self.val(ik).data(), g, n, m, d);
        let value = Tensor::from_parts(vec![g, n, m], dist);
        let rg = self.rg(iq) || self.rg(ik);
        self.push("pairwise_sq_dist", value, Op::PairwiseSqDist { q: iq, k: ik, active }, rg)
    }

    /// LRSA similarity scores.
    ///
    /// `q`, `k` are per-head projections `[B·H, n, dk]` and `x` is the
    /// attention input `[B, n, d_model]`. For group `(b, h)`:
    /// `S = −α·D(Q,K) / max(‖Q‖_F · max_i ‖x_i‖₂, floor)` where the row-norm
    /// maximum runs over the tokens of sample `b`.
    pub fn lrsa_scores(&mut self, q: Var, k: Var, x: Var, alpha: f64, floor: f64, heads: usize) -> Result<Var> {
        let (iq, ik, ix) = (self.idx(q)?, self.idx(k)?, self.idx(x)?);
        let (sq, sk, sx) = (self.val(iq).shape(), self.val(ik).shape(), self.val(ix).shape());
        if sq != sk || sq.len() != 3 {
            return Err(Error::shape("lrsa_scores", sq, sk));
        }
        if sx.len() != 3 || sx[0] * heads != sq[0] || sx[1] != sq[1] {
            return Err(Error::shape("lrsa_scores", sq, sx));
        }
        let (g, n, dk) = (sq[0], sq[1], sq[2]);
        let (b, d) = (sx[0], sx[2]);
        let (qv, kv, xv) = (self.val(iq).data(), self.val(ik).data(), self.val(ix).data());
        let (dist, active) = pairwise_forward(qv, kv, g, n, n, dk);

        let mut x_maxnorm = vec![0.0; b];
        let mut x_argmax = vec![0; b];
        for bi in 0..b {
            for t in 0..n {
                let row = &xv[(bi * n + t) * d..(bi * n + t + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > x_maxnorm[bi] {
                    x_maxnorm[bi] = norm;
                    x_argmax[bi] = t;
                }
            }
        }
        let q_frob: Vec<f64> = (0..g)
            .map(|grp| qv[grp * n * dk..(grp + 1) * n * dk].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut denom = vec![0.0; g];
        let mut floored = vec![false; g];
        let mut out = vec![0.0; g * n * n];
        for grp in 0..g {
            let raw = q_frob[grp] * x_maxnorm[grp / heads];
            floored[grp] = raw <= floor;
            denom[grp] = if floored[grp] { floor } else { raw };
            let c = -alpha / denom[grp];
            for idx in grp * n * n..(grp + 1) * n * n {
                out[idx] = c * dist[idx];
            }
        }
        let value = Tensor::from_parts(vec![g, n, n], out);
        let rg = self.rg(iq) || self.rg(ik) || self.rg(ix);
        let cache = LrsaCache { active, q_frob, x_maxnorm, x_argmax, denom, floored };
        self.push("lrsa_scores", value, Op::LrsaScores { q: iq, k: ik, x: ix, alpha, heads, cache }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).data().iter().sum();
        let rg = self.rg(ia);
        self.push("sum", Tensor::scalar(s), Op::Sum { a: ia }, rg)
    }

    /// Mean cross-entropy of `logits` (`[B,K]`) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let s = self.val(il).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.val(il).data().to_vec();
        softmax_rows_inplace(&mut probs, k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -libm::log(probs[i * k + y].max(f64::MIN_POSITIVE)))
            .sum::<f64>()
            / labels.len() as f64;
        let rg = self.rg(il);
        let op = Op::SoftmaxCrossEntropy { logits: il, labels: labels.to_vec(), probs };
        self.push("softmax_cross_entropy", Tensor::scalar(loss), op, rg)
    }

    // -- backward ----------------------------------------------------------

    /// Propagates `∂loss/∂·` to every differentiable node. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let il = self.idx(loss)?;
        if self.val(il).len() != 1 {
            return Err(Error::NonScalarLoss(self.val(il).shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: out,
            names: self.names.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = slot(nodes, grads, a) {
                    gemm_bt(g, bv.data(), da, m, n, k);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    gemm_at(av.data(), g, db, k, m, n);
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.val(a), self.val(b));
                let (grp, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if let Some(da) = slot(nodes, grads, a) {
                    for s in 0..grp {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let b_s = &bv.data()[s * k * n..(s + 1) * k * n];
                        let da_s = &mut da[s * m * k..(s + 1) * m * k];
                        if trans_b {
                            gemm(g_s, b_s, da_s, m, n, k);
                        } else {
                            gemm_bt(g_s, b_s, da_s, m, n, k);
                        }
                    }
                }
                if let Some(db) = slot(nodes, grads, b) {
                    for s in 0..grp {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let a_s = &av.data()[s * m * k..(s + 1) * m * k];
                        let db_s = &mut db[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            gemm_at(g_s, a_s, db_s, n, m, k);
                        } else {
                            gemm_at(a_s, g_s, db_s, k, m, n);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = slot(nodes, grads, a) {
                    axpy(da, g, 1.0);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    axpy(db, g, 1.0);
                }
            }
            &Op::Sub { a, b } => {
                if let Some(da) = slot(nodes, grads, a) {
                    axpy(da, g, 1.0);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    axpy(db, g, -1.0);
                }
            }
            &Op::AddBroadcast { a, b } => {
                if let Some(da) = slot(nodes, grads, a) {
                    axpy(da, g, 1.0);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    let p = db.len();
                    for chunk in g.chunks(p) {
                        axpy(db, chunk, 1.0);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                if let Some(da) = slot(nodes, grads, a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = slot(nodes, grads, b) {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(da) = slot(nodes, grads, a) {
                    axpy(da, g, c);
                }
            }
            &Op::Gelu { a } => {
                let x = self.val(a).data();
                if let Some(da) = slot(nodes, grads, a) {
                    for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                        *d += gi * special::gelu_grad(xi);
                    }
                }
            }
            &Op::Cos { a } => {
                let x = self.val(a).data();
                if let Some(da) = slot(nodes, grads, a) {
                    for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                        *d -= gi * libm::sin(xi);
                    }
                }
            }
            &Op::SoftmaxRows { a } => {
                let p = node.value.data();
                let n = node.value.last_dim();
                if let Some(da) = slot(nodes, grads, a) {
                    softmax_backward(p, g, da, n);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = self.val(*gamma).len();
                let gam = self.val(*gamma).data();
                if let Some(dg) = slot(nodes, grads, *gamma) {
                    for (r, gr) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            dg[j] += gr[j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(db) = slot(nodes, grads, *beta) {
                    for gr in g.chunks(n) {
                        axpy(db, gr, 1.0);
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, gr) in g.chunks(n).enumerate() {
                        let h = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let inv = inv_std[r];
                        for j in 0..n {
                            dx[r * n + j] += inv * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(da) = slot(nodes, grads, a) {
                    axpy(da, g, 1.0);
                }
            }
            &Op::SplitHeads { a, heads } => {
                let s = self.val(a).shape();
                let back = permute_heads(g, s[0], s[1], s[2], heads, false);
                if let Some(da) = slot(nodes, grads, a) {
                    axpy(da, &back, 1.0);
                }
            }
            &Op::MergeHeads { a, heads } => {
                let s = node.value.shape();
                let back = permute_heads(g, s[0], s[1], s[2], heads, true);
                if let Some(da) = slot(nodes, grads, a) {
                    axpy(da, &back, 1.0);
                }
            }
            &Op::PrependRow { a, row } => {
                let s = self.val(a).shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                if let Some(dr) = slot(nodes, grads, row) {
                    for bi in 0..b {
                        let off = bi * (t + 1) * d;
                        axpy(dr, &g[off..off + d], 1.0);
                    }
                }
                if let Some(da) = slot(nodes, grads, a) {
                    for bi in 0..b {
                        let src = bi * (t + 1) * d + d;
                        axpy(&mut da[bi * t * d..(bi + 1) * t * d], &g[src..src + t * d], 1.0);
                    }
                }
            }
            &Op::SelectRow { a, index } => {
                let s = self.val(a).shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                if let Some(da) = slot(nodes, grads, a) {
                    for bi in 0..b {
                        let off = (bi * t + index) * d;
                        axpy(&mut da[off..off + d], &g[bi * d..(bi + 1) * d], 1.0);
                    }
                }
            }
            Op::PairwiseSqDist { q, k, active } => {
                let (sq, sk) = (self.val(*q).shape(), self.val(*k).shape());
                let (grp, n, m, d) = (sq[0], sq[1], sk[1], sq[2]);
                let masked: Vec<f64> = g.iter().zip(active).map(|(&v, &on)| if on { v } else { 0.0 }).collect();
                let (qv, kv) = (self.val(*q).data(), self.val(*k).data());
                if let Some(dq) = slot(nodes, grads, *q) {
                    pairwise_backward_q(&masked, qv, kv, dq, grp, n, m, d);
                }
                if let Some(dk) = slot(nodes, grads, *k) {
                    pairwise_backward_k(&masked, qv, kv, dk, grp, n, m, d);
                }
            }
            Op::LrsaScores { q, k, x, alpha, heads, cache } => {
                let sq = self.val(*q).shape();
                let (grp, n, dk) = (sq[0], sq[1], sq[2]);
                let d = self.val(*x).shape()[2];
                let (qv, kv, xv) = (self.val(*q).data(), self.val(*k).data(), self.val(*x).data());
                let s = node.value.data();

                let mut g_dist = vec![0.0; g.len()];
                let mut g_denom = vec![0.0; grp];
                for gi in 0..grp {
                    let den = cache.denom[gi];
                    let range = gi * n * n..(gi + 1) * n * n;
                    let mut acc = 0.0;
                    for idx in range {
                        if cache.active[idx] {
                            g_dist[idx] = -alpha * g[idx] / den;
                        }
                        acc += g[idx] * s[idx];
                    }
                    if !cache.floored[gi] {
                        g_denom[gi] = -acc / den;
                    }
                }
                if let Some(dq) = slot(nodes, grads, *q) {
                    pairwise_backward_q(&g_dist, qv, kv, dq, grp, n, n, dk);
                    for gi in 0..grp {
                        let f = cache.q_frob[gi];
                        if g_denom[gi] == 0.0 || f == 0.0 {
                            continue;
                        }
                        let c = g_denom[gi] * cache.x_maxnorm[gi / heads] / f;
                        let range = gi * n * dk..(gi + 1) * n * dk;
                        for idx in range {
                            dq[idx] += c * qv[idx];
                        }
                    }
                }
                if let Some(dkb) = slot(nodes, grads, *k) {
                    pairwise_backward_k(&g_dist, qv, kv, dkb, grp, n, n, dk);
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    for gi in 0..grp {
                        let bi = gi / heads;
                        let mnorm = cache.x_maxnorm[bi];
                        if g_denom[gi] == 0.0 || mnorm == 0.0 {
                            continue;
                        }
                        let c = g_denom[gi] * cache.q_frob[gi] / mnorm;
                        let off = (bi * n + cache.x_argmax[bi]) * d;
                        for j in 0..d {
                            dx[off + j] += c * xv[off + j];
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = slot(nodes, grads, a) {
                    da.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.val(*logits).last_dim();
                let scale = g[0] / labels.len() as f64;
                if let Some(dl) = slot(nodes, grads, *logits) {
                    for (i, &y) in labels.iter().enumerate() {
                        for c in 0..k {
                            let target = if c == y { 1.0 } else { 0.0 };
                            dl[i * k + c] += scale * (probs[i * k + c] - target);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    names: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn named(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|&i| self.grads[i].as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }
}

/// Gradient buffer of node `j`, or `None` when `j` is not differentiable.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], j: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    let len = nodes[j].value.len();
    Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

pub(crate) fn softmax_rows_inplace(data: &mut [f64], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `dS_ij = P_ij (g_ij − Σ_t g_it P_it)`: the diagonal `P(1−P)` and
/// off-diagonal `−P_ij P_it` Jacobian cases contracted with `g`.
fn softmax_backward(p: &[f64], g: &[f64], out: &mut [f64], n: usize) {
    for ((pr, gr), or) in p.chunks(n).zip(g.chunks(n)).zip(out.chunks_mut(n)) {
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            or[j] += pr[j] * (gr[j] - dot);
        }
    }
}

fn permute_heads(src: &[f64], b: usize, t: usize, d: usize, heads: usize, split: bool) -> Vec<f64> {
    let dk = d / heads;
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..heads {
                let merged = (bi * t + ti) * d + h * dk;
                let splitted = ((bi * heads + h) * t + ti) * dk;
                let (from, to) = if split { (merged, splitted) } else { (splitted, merged) };
                out[to..to + dk].copy_from_slice(&src[from..from + dk]);
            }
        }
    }
    out
}

pub(crate) fn pairwise_forward(q: &[f64], k: &[f64], g: usize, n: usize, m: usize, d: usize) -> (Vec<f64>, Vec<bool>) {
    let mut dist = vec![0.0; g * n * m];
    let mut active = vec![false; g * n * m];
    for grp in 0..g {
        let qs = &q[grp * n * d..(grp + 1) * n * d];
        let ks = &k[grp * m * d..(grp + 1) * m * d];
        let qsq: Vec<f64> = qs.chunks(d).map(|r| r.iter().map(|v| v * v).sum()).collect();
        let ksq: Vec<f64> = ks.chunks(d).map(|r| r.iter().map(|v| v * v).sum()).collect();
        let mut cross = vec![0.0; n * m];
        gemm_bt(qs, ks, &mut cross, n, d, m);
        for i in 0..n {
            for j in 0..m {
                let raw = qsq[i] - 2.0 * cross[i * m + j] + ksq[j];
                let idx = grp * n * m + i * m + j;
                if raw > 0.0 {
                    dist[idx] = raw;
                    active[idx] = true;
                }
            }
        }
    }
    (dist, active)
}

/// `dQ_i += 2 Σ_j g_ij (q_i − k_j)`.
#[allow(clippy::too_many_arguments)]
fn pairwise_backward_q(g: &[f64], q: &[f64], k: &[f64], dq: &mut [f64], grp: usize, n: usize, m: usize, d: usize) {
    for s in 0..grp {
        let gs = &g[s * n * m..(s + 1) * n * m];
        let qs = &q[s * n * d..(s + 1) * n * d];
        let ks = &k[s * m * d..(s + 1) * m * d];
        let dqs = &mut dq[s * n * d..(s + 1) * n * d];
        let mut gk = vec![0.0; n * d];
        gemm(gs, ks, &mut gk, n, m, d);
        for i in 0..n {
            let rsum: f64 = gs[i * m..(i + 1) * m].iter().sum();
            for c in 0..d {
                dqs[i * d + c] += 2.0 * (rsum * qs[i * d + c] - gk[i * d + c]);
            }
        }
    }
}

/// `dK_j += 2 Σ_i g_ij (k_j − q_i)`.
#[allow(clippy::too_many_arguments)]
fn pairwise_backward_k(g: &[f64], q: &[f64], k: &[f64], dk: &mut [f64], grp: usize, n: usize, m: usize, d: usize) {
    for s in 0..grp {
        let gs = &g[s * n * m..(s + 1) * n * m];
        let qs = &q[s * n * d..(s + 1) * n * d];
        let ks = &k[s * m * d..(s + 1) * m * d];
        let dks = &mut dk[s * m * d..(s + 1) * m * d];
        let mut gq = vec![0.0; m * d];
        gemm_at(gs, qs, &mut gq, m, n, d);
        let mut csum = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                csum[j] += gs[i * m + j];
            }
        }
        for j in 0..m {
            for c in 0..d {
                dks[j * d + c] += 2.0 * (csum[j] * ks[j * d + c] - gq[j * d + c]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, -2.0], &[3.0, 0.5]]), true).unwrap();
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut tape = Tape::new();
        let data = t(&[&[1.0, -2.0, 3.5]]);
        let x = tape.leaf(data.clone(), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), data.data());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true).unwrap();
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap(); // 2x²
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 8.0);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true).unwrap();
        let y = tape.scale(x, 3.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_variable_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0), true).unwrap();
        let _ = b.leaf(Tensor::scalar(1.0), true).unwrap();
        assert!(matches!(b.scale(x, 2.0), Err(Error::DetachedTape)));
        assert!(matches!(b.backward(x), Err(Error::DetachedTape)));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(f64::MAX), true).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1000.0, 0.0]])).unwrap();
        let p = tape.softmax_rows(x).unwrap();
        let v = tape.value(p).data();
        assert_eq!(v[0], 1.0);
        assert!(v[1] >= 0.0 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[4.2, 4.2, 4.2]])).unwrap();
        let p = tape.softmax_rows(x).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn head_permutation_round_trips() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap()).unwrap();
        let s = tape.split_heads(x, 2).unwrap();
        assert_eq!(tape.shape(s), &[4, 3, 2]);
        // group (b=0, h=1), token 0 holds columns 2..4 of row 0.
        assert_eq!(&tape.value(s).data()[6..8], &[2.0, 3.0]);
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m).data(), &data[..]);
    }

    #[test]
    fn named_params_route_gradients() {
        let mut tape = Tape::new();
        let w = Tensor::from_rows(&[&[2.0]]).unwrap().with_requires_grad(true);
        let frozen = Tensor::from_rows(&[&[5.0]]).unwrap();
        let wv = tape.param("w", &w).unwrap();
        let fv = tape.param("frozen", &frozen).unwrap();
        let y = tape.matmul(wv, fv).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.named("w").unwrap().item(), 5.0);
        assert!(grads.named("frozen").is_none());
        assert!(grads.get(fv).is_none());
    }
}

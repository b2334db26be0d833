//! Multi-head self-attention with interchangeable similarity kernels.
//!
//! * `dpsa`: `S = QKᵀ/√d_k`
//! * `l2`:   `S = −‖q_i − k_j‖²/√d_k`
//! * `lrsa`: `S = −α‖q_i − k_j‖² / (‖Q‖_F · max_t ‖x_t‖₂)`
//!
//! Each head is normalized independently; the LRSA denominator uses that
//! head's `Q` and the token-norm maximum of the shared input.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::module::{join, Module};
use crate::tensor::Tensor;

pub const DEFAULT_DENOM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Dpsa,
    L2,
    Lrsa,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Dpsa, Kernel::L2, Kernel::Lrsa];

    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::Dpsa => "dpsa",
            Kernel::L2 => "l2",
            Kernel::Lrsa => "lrsa",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpsa" => Ok(Kernel::Dpsa),
            "l2" => Ok(Kernel::L2),
            "lrsa" => Ok(Kernel::Lrsa),
            other => Err(Error::Config(format!("unknown kernel {other:?}; expected dpsa, l2 or lrsa"))),
        }
    }
}

/// Attention weights. `w_q`, `w_k`, `w_v` are `d_model × d_model` with head
/// `h` occupying columns `h·d_k .. (h+1)·d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub d_model: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub kernel: Kernel,
    pub alpha: f64,
    pub denom_floor: f64,
    /// Share `w_q` as the key projection (`w_k` is then unused).
    pub tie_qk: bool,
}

impl AttentionParams {
    /// Weights drawn from `Normal(0, std²)`.
    pub fn init<R: Rng + ?Sized>(d_model: usize, heads: usize, kernel: Kernel, alpha: f64, std: f64, rng: &mut R) -> Result<Self> {
        let mk = |rng: &mut R| Tensor::randn(&[d_model, d_model], std, rng).with_requires_grad(true);
        let p = AttentionParams {
            heads,
            d_model,
            w_q: mk(rng),
            w_k: mk(rng),
            w_v: mk(rng),
            w_o: mk(rng),
            kernel,
            alpha,
            denom_floor: DEFAULT_DENOM_FLOOR,
            tie_qk: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.kernel == Kernel::Lrsa && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.denom_floor > 0.0) {
            return Err(Error::Config("denom_floor must be positive".into()));
        }
        let sq = [self.d_model, self.d_model];
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if w.shape() != sq {
                return Err(Error::invalid_shape("attention", w.shape(), format!("{name} must be {sq:?}")));
            }
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    fn head_columns(&self, w: &Tensor, head: usize) -> Tensor {
        let dk = self.d_k();
        let mut out = Vec::with_capacity(self.d_model * dk);
        for r in 0..self.d_model {
            out.extend_from_slice(&w.row(r)[head * dk..(head + 1) * dk]);
        }
        Tensor::from_parts(vec![self.d_model, dk], out)
    }

    /// Query projection of one head (`d_model × d_k`).
    pub fn head_wq(&self, head: usize) -> Tensor {
        self.head_columns(&self.w_q, head)
    }

    pub fn head_wk(&self, head: usize) -> Tensor {
        self.head_columns(if self.tie_qk { &self.w_q } else { &self.w_k }, head)
    }

    pub fn head_wv(&self, head: usize) -> Tensor {
        self.head_columns(&self.w_v, head)
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<BoundAttention> {
        let wq = tape.param(&join(prefix, "w_q"), &self.w_q)?;
        let wk = if self.tie_qk {
            wq
        } else {
            tape.param(&join(prefix, "w_k"), &self.w_k)?
        };
        Ok(BoundAttention {
            wq,
            wk,
            wv: tape.param(&join(prefix, "w_v"), &self.w_v)?,
            wo: tape.param(&join(prefix, "w_o"), &self.w_o)?,
        })
    }
}

impl Module for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w_q"), &self.w_q);
        f(&join(prefix, "w_k"), &self.w_k);
        f(&join(prefix, "w_v"), &self.w_v);
        f(&join(prefix, "w_o"), &self.w_o);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w_q"), &mut self.w_q);
        f(&join(prefix, "w_k"), &mut self.w_k);
        f(&join(prefix, "w_v"), &mut self.w_v);
        f(&join(prefix, "w_o"), &mut self.w_o);
    }
}

/// Attention weights recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Intermediate tape values of one attention forward.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `[B·H, n, n]` similarity scores.
    pub scores: Var,
    /// `[B·H, n, n]` attention weights (row softmax of `scores`).
    pub probs: Var,
    /// `[B, n, d_model]` output after the output projection.
    pub output: Var,
}

fn project(tape: &mut Tape, x2: Var, w: Var, b: usize, n: usize, d: usize, heads: usize) -> Result<Var> {
    let y = tape.matmul(x2, w)?;
    let y = tape.reshape(y, &[b, n, d])?;
    tape.split_heads(y, heads)
}

/// Scores for a batch `x` of shape `[B, n, d_model]`.
pub fn scores_on_tape(tape: &mut Tape, x: Var, p: &AttentionParams, w: &BoundAttention) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] != p.d_model {
        return Err(Error::invalid_shape("attention", &s, format!("expected [batch, tokens, {}]", p.d_model)));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let x2 = tape.reshape(x, &[b * n, d])?;
    let q = project(tape, x2, w.wq, b, n, d, p.heads)?;
    let k = if w.wk == w.wq { q } else { project(tape, x2, w.wk, b, n, d, p.heads)? };
    let v = project(tape, x2, w.wv, b, n, d, p.heads)?;
    let inv_sqrt_dk = 1.0 / (p.d_k() as f64).sqrt();
    let scores = match p.kernel {
        Kernel::Dpsa => {
            let qk = tape.batch_matmul(q, k, true)?;
            tape.scale(qk, inv_sqrt_dk)?
        }
        Kernel::L2 => {
            let dist = tape.pairwise_sq_dist(q, k)?;
            tape.scale(dist, -inv_sqrt_dk)?
        }
        Kernel::Lrsa => tape.lrsa_scores(q, k, x, p.alpha, p.denom_floor, p.heads)?,
    };
    Ok((scores, v))
}

/// Full attention forward on a batch: per head `softmax(S)·V`, heads
/// concatenated, then projected by `w_o`.
pub fn forward_on_tape(tape: &mut Tape, x: Var, p: &AttentionParams, w: &BoundAttention) -> Result<AttentionVars> {
    let (scores, v) = scores_on_tape(tape, x, p, w)?;
    let probs = tape.softmax_rows(scores)?;
    let y = tape.batch_matmul(probs, v, false)?;
    let y = tape.merge_heads(y, p.heads)?;
    let s = tape.shape(y).to_vec();
    let y2 = tape.reshape(y, &[s[0] * s[1], s[2]])?;
    let out = tape.matmul(y2, w.wo)?;
    let output = tape.reshape(out, &s)?;
    Ok(AttentionVars { scores, probs, output })
}

fn single(x: &Tensor, p: &AttentionParams) -> Result<(Tape, Var, BoundAttention)> {
    if x.ndim() != 2 || x.cols() != p.d_model {
        return Err(Error::invalid_shape("attention", x.shape(), format!("expected [tokens, {}]", p.d_model)));
    }
    p.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.reshape(&[1, x.rows(), x.cols()])?)?;
    let w = p.bind(&mut tape, "")?;
    Ok((tape, xv, w))
}

fn head_slice(t: &Tensor, head: usize) -> Result<Tensor> {
    let s = t.shape();
    if head >= s[0] {
        return Err(Error::InvalidInput(format!("head {head} out of range ({} heads)", s[0])));
    }
    let per = s[1] * s[2];
    Tensor::new(vec![s[1], s[2]], t.data()[head * per..(head + 1) * per].to_vec())
}

/// `D[i][j] = ‖Q_i − K_j‖₂²` via `‖Q‖²_row − 2QKᵀ + ‖K‖²_colᵀ`, clamped at 0.
pub fn pairwise_sq_dist(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.ndim() != 2 || k.ndim() != 2 || q.cols() != k.cols() {
        return Err(Error::shape("pairwise_sq_dist", q.shape(), k.shape()));
    }
    let (n, m, d) = (q.rows(), k.rows(), q.cols());
    let (dist, _) = crate::autodiff::pairwise_forward(q.data(), k.data(), 1, n, m, d);
    Tensor::new(vec![n, m], dist)
}

/// Scores of one head for a single sequence `x` (`n × d_model`) using the
/// configured kernel.
pub fn scores(x: &Tensor, p: &AttentionParams, head: usize) -> Result<Tensor> {
    let (mut tape, xv, w) = single(x, p)?;
    let (s, _) = scores_on_tape(&mut tape, xv, p, &w)?;
    head_slice(tape.value(s), head)
}

fn with_kernel(p: &AttentionParams, kernel: Kernel) -> AttentionParams {
    AttentionParams { kernel, ..p.clone() }
}

pub fn lrsa_scores(x: &Tensor, p: &AttentionParams, head: usize) -> Result<Tensor> {
    scores(x, &with_kernel(p, Kernel::Lrsa), head)
}

pub fn dpsa_scores(x: &Tensor, p: &AttentionParams, head: usize) -> Result<Tensor> {
    scores(x, &with_kernel(p, Kernel::Dpsa), head)
}

pub fn l2_scores(x: &Tensor, p: &AttentionParams, head: usize) -> Result<Tensor> {
    scores(x, &with_kernel(p, Kernel::L2), head)
}

/// Attention weights of every head, `[heads, n, n]`.
pub fn attention_probs(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (mut tape, xv, w) = single(x, p)?;
    let (s, _) = scores_on_tape(&mut tape, xv, p, &w)?;
    let probs = tape.softmax_rows(s)?;
    Ok(tape.value(probs).detached())
}

/// Attention output for a single sequence (`n × d_model`).
pub fn attention_forward(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (mut tape, xv, w) = single(x, p)?;
    let vars = forward_on_tape(&mut tape, xv, p, &w)?;
    tape.value(vars.output).reshape(&[x.rows(), x.cols()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, heads: usize, kernel: Kernel, seed: u64) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionParams::init(d, heads, kernel, 100.0, 0.5, &mut rng).unwrap()
    }

    fn brute_pairwise(q: &Tensor, k: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(&[q.rows(), k.rows()]);
        for i in 0..q.rows() {
            for j in 0..k.rows() {
                let d: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                out.set(i, j, d);
            }
        }
        out
    }

    #[test]
    fn pairwise_examples() {
        let q = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[&[0.0, 1.0]]).unwrap();
        assert_eq!(pairwise_sq_dist(&q, &k).unwrap().data(), &[2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let k = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let fast = pairwise_sq_dist(&q, &k).unwrap();
        let slow = brute_pairwise(&q, &k);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let self_d = pairwise_sq_dist(&q, &q).unwrap();
        for i in 0..6 {
            assert!(self_d.get(i, i).abs() < 1e-12);
            for j in 0..6 {
                assert!(self_d.get(i, j) >= 0.0);
                assert!((self_d.get(i, j) - self_d.get(j, i)).abs() < 1e-12);
            }
        }
        assert!(pairwise_sq_dist(&q, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn lrsa_identical_tokens_give_uniform_attention() {
        let mut p = params(4, 2, Kernel::Lrsa, 1);
        p.w_k = p.w_q.clone();
        let x = Tensor::from_rows(&[&[0.3, -1.0, 2.0, 0.5][..]; 3]).unwrap();
        let s = lrsa_scores(&x, &p, 1).unwrap();
        assert!(s.data().iter().all(|v| v.abs() < 1e-12));
        let probs = attention_probs(&x, &p).unwrap();
        assert!(probs.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn lrsa_linear_in_alpha_and_nonpositive() {
        let p = params(8, 2, Kernel::Lrsa, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let s1 = lrsa_scores(&x, &p, 0).unwrap();
        let p2 = AttentionParams { alpha: 200.0, ..p.clone() };
        let s2 = lrsa_scores(&x, &p2, 0).unwrap();
        for (a, b) in s1.data().iter().zip(s2.data()) {
            assert!(*a <= 0.0);
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_input_hits_the_floor_and_is_uniform() {
        for kernel in Kernel::ALL {
            let p = params(4, 1, kernel, 4);
            let x = Tensor::zeros(&[3, 4]);
            let s = scores(&x, &p, 0).unwrap();
            assert!(s.data().iter().all(|&v| v == 0.0), "{kernel}");
            let probs = attention_probs(&x, &p).unwrap();
            assert!(probs.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn dpsa_examples() {
        let mut p = params(1, 1, Kernel::Dpsa, 0);
        p.w_q = Tensor::from_rows(&[&[2.0]]).unwrap();
        p.w_k = Tensor::from_rows(&[&[3.0]]).unwrap();
        let x = Tensor::from_rows(&[&[1.0]]).unwrap();
        assert_eq!(dpsa_scores(&x, &p, 0).unwrap().data(), &[6.0]);

        let p = params(6, 3, Kernel::Dpsa, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let s = dpsa_scores(&x, &p, 2).unwrap();
        let s3 = dpsa_scores(&x.scale(3.0), &p, 2).unwrap();
        for (a, b) in s.data().iter().zip(s3.data()) {
            assert!((9.0 * a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn l2_matches_rescaled_lrsa() {
        let p = params(6, 2, Kernel::L2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
        for head in 0..2 {
            let l2 = l2_scores(&x, &p, head).unwrap();
            let lrsa = lrsa_scores(&x, &p, head).unwrap();
            let q = x.matmul(&p.head_wq(head)).unwrap();
            let den = q.frobenius() * x.norms().unwrap().inf2;
            let c = den / (p.alpha * (p.d_k() as f64).sqrt());
            for (a, b) in l2.data().iter().zip(lrsa.data()) {
                assert!((a - b * c).abs() < 1e-10 * a.abs().max(1.0));
            }
        }
        // single token
        let x1 = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let q = x1.matmul(&p.head_wq(0)).unwrap();
        let k = x1.matmul(&p.head_wk(0)).unwrap();
        let d: f64 = q.data().iter().zip(k.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let s = l2_scores(&x1, &p, 0).unwrap();
        assert!((s.item() + d / (p.d_k() as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tied_l2_has_zero_diagonal() {
        let mut p = params(4, 2, Kernel::L2, 11);
        p.tie_qk = true;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let s = l2_scores(&x, &p, 0).unwrap();
        for i in 0..3 {
            assert!(s.get(i, i).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut p = params(4, 2, Kernel::Dpsa, 13);
        p.w_q = Tensor::zeros(&[4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let out = attention_forward(&x, &p).unwrap();
        let v = x.matmul(&p.w_v).unwrap();
        let mut mean = vec![0.0; 4];
        for i in 0..3 {
            for (m, val) in mean.iter_mut().zip(v.row(i)) {
                *m += val / 3.0;
            }
        }
        let expected = Tensor::new(vec![1, 4], mean).unwrap().matmul(&p.w_o).unwrap();
        for i in 0..3 {
            for (a, b) in out.row(i).iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_identity_output_collapses() {
        let mut p = params(3, 1, Kernel::Lrsa, 15);
        p.w_o = Tensor::eye(3);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let out = attention_forward(&x, &p).unwrap();
        let s = lrsa_scores(&x, &p, 0).unwrap();
        let mut probs = s.data().to_vec();
        crate::autodiff::softmax_rows_inplace(&mut probs, 4);
        let probs = Tensor::new(vec![4, 4], probs).unwrap();
        let expected = probs.matmul(&x).unwrap().matmul(&p.w_v).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_leaves_tied_lrsa_numerator_unchanged() {
        let mut p = params(4, 1, Kernel::Lrsa, 17);
        p.w_k = p.w_q.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let shift = [0.7, -0.2, 1.5, 0.1];
        let mut xs = x.clone();
        for i in 0..5 {
            for j in 0..4 {
                xs.set(i, j, x.get(i, j) + shift[j]);
            }
        }
        let q = x.matmul(&p.w_q).unwrap();
        let qs = xs.matmul(&p.w_q).unwrap();
        let d = pairwise_sq_dist(&q, &q).unwrap();
        let ds = pairwise_sq_dist(&qs, &qs).unwrap();
        for (a, b) in d.data().iter().zip(ds.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation() {
        let mut p = params(4, 2, Kernel::Lrsa, 0);
        p.alpha = 0.0;
        assert!(p.validate().is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionParams::init(5, 2, Kernel::Dpsa, 1.0, 0.02, &mut rng).is_err());
        assert_eq!("lrsa".parse::<Kernel>().unwrap(), Kernel::Lrsa);
        assert!("scsa".parse::<Kernel>().is_err());
    }
}

//! Analytic Lipschitz bounds for every sub-block and finite-difference
//! estimates to hold them against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, attention_probs, AttentionParams, Kernel};
use crate::autodiff::Tape;
use crate::blocks::{layer_norm, lrformer_layer, mlp_forward, LayerNormParams, LayerParams, MlpParams};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::special::{gelu_grad, gelu_second};
use crate::tensor::Tensor;

/// Iteration cap. Convergence goes as `(σ₂/σ₁)^{2k}`, and random square
/// matrices often have `σ₂/σ₁ > 0.99`, so 200 steps can leave a 1e-4
/// relative shortfall; the tolerance is what normally stops the loop.
pub const POWER_ITERS: usize = 20_000;
pub const POWER_TOL: f64 = 1e-10;
pub const PROBE_DELTA: f64 = 1e-4;

const POWER_SEED: u64 = 0x5eed_0f_5eed;

/// Positive root of GeLU″ on `[0.5, 2.5]`, by bisection to 1e-10.
pub fn gelu_peak() -> Result<f64> {
    let (mut lo, mut hi) = (0.5_f64, 2.5_f64);
    let (flo, fhi) = (gelu_second(lo), gelu_second(hi));
    if flo.signum() == fhi.signum() {
        return Err(Error::Numerical(format!("GeLU'' does not change sign on [0.5, 2.5] ({flo}, {fhi})")));
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if gelu_second(mid).signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `max_x GeLU′(x)`, about 1.1289.
pub fn gelu_lipschitz() -> Result<f64> {
    Ok(gelu_grad(gelu_peak()?))
}

/// Largest singular value by power iteration on `WᵀW` from a fixed start
/// vector; stops when successive estimates agree to `tol` (relative).
pub fn spectral_norm(w: &Tensor, iters: usize, tol: f64) -> Result<f64> {
    if w.ndim() != 2 {
        return Err(Error::invalid_shape("spectral_norm", w.shape(), "expected a matrix"));
    }
    if iters == 0 {
        return Err(Error::InvalidInput("spectral_norm needs at least one iteration".into()));
    }
    let (r, c) = (w.rows(), w.cols());
    let a = w.data();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Vec<f64> = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    normalize(&mut v);
    let mut wv = vec![0.0; r];
    let mut sigma = 0.0;
    for _ in 0..iters {
        for i in 0..r {
            wv[i] = a[i * c..(i + 1) * c].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let est = norm2(&wv);
        if est == 0.0 {
            return Ok(0.0);
        }
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..r).map(|i| a[i * c + j] * wv[i]).sum();
        }
        normalize(&mut v);
        let done = (est - sigma).abs() <= tol * est;
        sigma = est;
        if done {
            break;
        }
    }
    // One more product with the final vector.
    for i in 0..r {
        wv[i] = a[i * c..(i + 1) * c].iter().zip(&v).map(|(x, y)| x * y).sum();
    }
    Ok(norm2(&wv).max(sigma))
}

pub fn sigma(w: &Tensor) -> Result<f64> {
    spectral_norm(w, POWER_ITERS, POWER_TOL)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `η = ε^{−1/2}·max|γᵢ|·N`.
pub fn layernorm_bound(p: &LayerNormParams) -> f64 {
    p.gamma.max_abs() / p.epsilon.sqrt() * p.width() as f64
}

/// `GeLU-const · σ(W₁) · σ(W₂)`.
pub fn mlp_bound(p: &MlpParams) -> Result<f64> {
    Ok(gelu_lipschitz()? * sigma(&p.w1)? * sigma(&p.w2)?)
}

/// Per-head `(6α/‖X‖_F)·((σ(W_Q)+σ(W_K))/‖W_Q‖_F)²` for a single sequence
/// `x` (`[n, d_model]`); both norms are floored at `denom_floor`.
pub fn lrsa_head_bounds(p: &AttentionParams, x: &Tensor) -> Result<Vec<f64>> {
    p.validate()?;
    if x.ndim() != 2 || x.cols() != p.d_model {
        return Err(Error::invalid_shape("lrsa_bound", x.shape(), format!("expected [tokens, {}]", p.d_model)));
    }
    let xf = x.frobenius().max(p.denom_floor);
    (0..p.heads)
        .map(|h| {
            let (wq, wk) = (p.head_wq(h), p.head_wk(h));
            let ratio = (sigma(&wq)? + sigma(&wk)?) / wq.frobenius().max(p.denom_floor);
            Ok(6.0 * p.alpha / xf * ratio * ratio)
        })
        .collect()
}

/// Max over heads of [`lrsa_head_bounds`].
pub fn lrsa_bound(p: &AttentionParams, x: &Tensor) -> Result<f64> {
    Ok(lrsa_head_bounds(p, x)?.into_iter().fold(0.0, f64::max))
}

/// Sub-bounds of one layer and their composition
/// `η₁·η₂·((1 + L_LRSA) + L_MLP·(1 + L_LRSA))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBound {
    pub eta1: f64,
    pub eta2: f64,
    pub sigma_w1: f64,
    pub sigma_w2: f64,
    pub l_lrsa: f64,
    pub l_mlp: f64,
    pub l_layer: f64,
}

pub fn compose_layer_bound(eta1: f64, eta2: f64, l_lrsa: f64, l_mlp: f64) -> f64 {
    eta1 * eta2 * ((1.0 + l_lrsa) + l_mlp * (1.0 + l_lrsa))
}

/// Layer bound at input `x`. Only meaningful for the LRSA kernel.
pub fn layer_bound(p: &LayerParams, x: &Tensor) -> Result<LayerBound> {
    if p.attn.kernel != Kernel::Lrsa {
        return Err(Error::InvalidInput(format!("no Lipschitz bound for the {} kernel", p.attn.kernel)));
    }
    let (sigma_w1, sigma_w2) = (sigma(&p.mlp.w1)?, sigma(&p.mlp.w2)?);
    let l_mlp = gelu_lipschitz()? * sigma_w1 * sigma_w2;
    let l_lrsa = lrsa_bound(&p.attn, x)?;
    let (eta1, eta2) = (layernorm_bound(&p.ln1), layernorm_bound(&p.ln2));
    Ok(LayerBound { eta1, eta2, sigma_w1, sigma_w2, l_lrsa, l_mlp, l_layer: compose_layer_bound(eta1, eta2, l_lrsa, l_mlp) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Inf,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L2 => norm2(v),
            Norm::Inf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// A random direction of unit norm.
    pub fn direction<R: Rng + ?Sized>(self, len: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Norm::Inf => (0..len).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
            Norm::L2 => loop {
                let mut v: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                if norm2(&v) > 0.0 {
                    normalize(&mut v);
                    break v;
                }
            },
        }
    }
}

/// `max ‖f(x + δu) − f(x)‖_p / δ` over `n_probes` base points from
/// `sampler` and random unit directions `u`.
pub fn empirical_lipschitz<F, S, R>(f: F, mut sampler: S, n_probes: usize, delta: f64, norm: Norm, rng: &mut R) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    S: FnMut(&mut R) -> Tensor,
    R: Rng + ?Sized,
{
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("probe step must be positive, got {delta}")));
    }
    let mut best: f64 = 0.0;
    for _ in 0..n_probes {
        let x = sampler(rng);
        let u = norm.direction(x.len(), rng);
        let mut xp = x.clone();
        xp.data_mut().iter_mut().zip(&u).for_each(|(a, b)| *a += delta * b);
        let (fx, fxp) = (f(&x)?, f(&xp)?);
        if !fx.is_finite() || !fxp.is_finite() {
            return Err(Error::NonFinite { op: "empirical_lipschitz" });
        }
        let diff: Vec<f64> = fxp.data().iter().zip(fx.data()).map(|(a, b)| a - b).collect();
        best = best.max(norm.of(&diff) / delta);
    }
    Ok(best)
}

/// Finite-difference estimate of `max_{h,i,j} ‖∂P^h_ij/∂x_k‖_∞` at `x` for
/// a random token `k` per probe: every coordinate of `x_k` is stepped by
/// `delta` in turn and the largest change of any attention weight recorded.
pub fn attention_probs_probe<R: Rng + ?Sized>(
    p: &AttentionParams,
    x: &Tensor,
    n_probes: usize,
    delta: f64,
    rng: &mut R,
) -> Result<f64> {
    let n = x.rows();
    let d = x.cols();
    let base = attention_probs(x, p)?;
    let mut best: f64 = 0.0;
    for _ in 0..n_probes {
        let k = rng.random_range(0..n);
        for l in 0..d {
            let mut xp = x.clone();
            xp.set(k, l, x.get(k, l) + delta);
            let pp = attention_probs(&xp, p)?;
            let m = pp.data().iter().zip(base.data()).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            best = best.max(m / delta);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub layer: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub sigma_w1: f64,
    pub sigma_w2: f64,
    /// Absent for kernels without a bound (dpsa, l2).
    pub l_lrsa: Option<f64>,
    pub l_mlp: f64,
    pub l_layer: Option<f64>,
    /// ∞-norm ratio of the whole layer map.
    pub empirical: f64,
    pub margin: Option<f64>,
    pub empirical_ln1: f64,
    pub empirical_ln2: f64,
    /// 2-norm ratio of the token-wise MLP.
    pub empirical_mlp: f64,
    /// Largest `|∂P_ij/∂x_kl|` of the attention weights (not the full
    /// attention output).
    pub empirical_attn_probs: f64,
    pub violated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub gelu_const: f64,
    pub kernel: Kernel,
    pub alpha: f64,
    pub n_reference: usize,
    pub probes: usize,
    pub delta: f64,
    pub layers: Vec<LayerAudit>,
}

impl LipschitzReport {
    pub fn any_violation(&self) -> bool {
        self.layers.iter().any(|l| l.violated)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AuditOptions {
    pub probes: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions { probes: 200, delta: PROBE_DELTA, seed: 0 }
    }
}

fn sample_slice(t: &Tensor, b: usize) -> Result<Tensor> {
    let s = t.shape();
    let per = s[1] * s[2];
    Tensor::new(vec![s[1], s[2]], t.data()[b * per..(b + 1) * per].to_vec())
}

fn token(x: &Tensor, i: usize) -> Tensor {
    Tensor::from_parts(vec![1, x.cols()], x.row(i).to_vec())
}

/// Bounds versus measurements at every layer, with the layer inputs taken
/// from forwarding `reference` (`[B, in_features]`) through `model`.
/// Data-dependent LRSA bounds use the worst sample of the batch.
pub fn audit(model: &Model, reference: &Tensor, opts: &AuditOptions) -> Result<LipschitzReport> {
    let mut tape = Tape::new();
    let fwd = model.forward_on_tape(&mut tape, reference)?;
    let bsz = reference.rows();
    let gelu_const = gelu_lipschitz()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut layers = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate() {
        let input = if li == 0 { fwd.embedded } else { fwd.layers[li - 1].output };
        let xs: Vec<Tensor> = (0..bsz).map(|b| sample_slice(tape.value(input), b)).collect::<Result<_>>()?;
        let us: Vec<Tensor> = (0..bsz).map(|b| sample_slice(tape.value(fwd.layers[li].inner), b)).collect::<Result<_>>()?;

        let (sigma_w1, sigma_w2) = (sigma(&layer.mlp.w1)?, sigma(&layer.mlp.w2)?);
        let l_mlp = gelu_const * sigma_w1 * sigma_w2;
        let (eta1, eta2) = (layernorm_bound(&layer.ln1), layernorm_bound(&layer.ln2));
        let l_lrsa = if layer.attn.kernel == Kernel::Lrsa {
            let mut worst: f64 = 0.0;
            for x in &xs {
                worst = worst.max(lrsa_bound(&layer.attn, x)?);
            }
            Some(worst)
        } else {
            None
        };
        let l_layer = l_lrsa.map(|l| compose_layer_bound(eta1, eta2, l, l_mlp));

        let n_tok = xs[0].rows();
        let pick = |rng: &mut ChaCha8Rng, set: &[Tensor]| set[rng.random_range(0..set.len())].clone();
        let empirical = empirical_lipschitz(|x| lrformer_layer(x, layer), |r| pick(r, &xs), opts.probes, opts.delta, Norm::Inf, &mut rng)?;

        let r1: Vec<Tensor> = xs
            .iter()
            .map(|x| {
                let a = attention_forward(x, &layer.attn)?;
                Ok(Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(a.data()).map(|(p, q)| p + q).collect()))
            })
            .collect::<Result<_>>()?;
        let r2: Vec<Tensor> = us
            .iter()
            .map(|u| {
                let m = mlp_forward(u, &layer.mlp)?;
                Ok(Tensor::from_parts(u.shape().to_vec(), u.data().iter().zip(m.data()).map(|(p, q)| p + q).collect()))
            })
            .collect::<Result<_>>()?;
        let tok = |r: &mut ChaCha8Rng, set: &[Tensor]| token(&set[r.random_range(0..set.len())], r.random_range(0..n_tok));
        let empirical_ln1 = empirical_lipschitz(|v| layer_norm(v, &layer.ln1), |r| tok(r, &r1), opts.probes, opts.delta, Norm::Inf, &mut rng)?;
        let empirical_ln2 = empirical_lipschitz(|v| layer_norm(v, &layer.ln2), |r| tok(r, &r2), opts.probes, opts.delta, Norm::Inf, &mut rng)?;
        let empirical_mlp = empirical_lipschitz(|v| mlp_forward(v, &layer.mlp), |r| tok(r, &us), opts.probes, opts.delta, Norm::L2, &mut rng)?;

        let mut empirical_attn_probs: f64 = 0.0;
        let per_sample = opts.probes.div_ceil(bsz).max(1);
        let mut remaining = opts.probes;
        for x in &xs {
            if remaining == 0 {
                break;
            }
            let k = per_sample.min(remaining);
            empirical_attn_probs = empirical_attn_probs.max(attention_probs_probe(&layer.attn, x, k, opts.delta, &mut rng)?);
            remaining -= k;
        }

        let violated = empirical_ln1 > eta1
            || empirical_ln2 > eta2
            || empirical_mlp > l_mlp
            || l_lrsa.is_some_and(|l| empirical_attn_probs > l)
            || l_layer.is_some_and(|l| empirical > l);
        layers.push(LayerAudit {
            layer: li,
            eta1,
            eta2,
            sigma_w1,
            sigma_w2,
            l_lrsa,
            l_mlp,
            l_layer,
            empirical,
            margin: l_layer.map(|l| l - empirical),
            empirical_ln1,
            empirical_ln2,
            empirical_mlp,
            empirical_attn_probs,
            violated,
        });
    }
    Ok(LipschitzReport {
        gelu_const,
        kernel: model.config.kernel,
        alpha: model.config.alpha,
        n_reference: bsz,
        probes: opts.probes,
        delta: opts.delta,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_constant() {
        let c = gelu_lipschitz().unwrap();
        assert!((1.128..=1.130).contains(&c), "{c}");
        assert!(gelu_second(gelu_peak().unwrap()).abs() < 1e-8);
        assert!((gelu_peak().unwrap() - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_examples() {
        let d = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!((sigma(&d).unwrap() - 3.0).abs() < 1e-10);
        let (c, s) = (0.6, 0.8);
        let rot = Tensor::from_rows(&[&[c, -s], &[s, c]]).unwrap();
        assert!((sigma(&rot).unwrap() - 1.0).abs() < 1e-8);
        assert_eq!(sigma(&Tensor::zeros(&[3, 2])).unwrap(), 0.0);
        assert!(spectral_norm(&d, 0, 1e-10).is_err());
    }

    #[test]
    fn layernorm_bound_examples() {
        let p = LayerNormParams::new(24);
        assert!((layernorm_bound(&p) - 7589.466_384_404_11).abs() < 1e-6);
        let mut z = LayerNormParams::new(24);
        z.gamma = Tensor::zeros(&[24]);
        assert_eq!(layernorm_bound(&z), 0.0);
        assert!((layernorm_bound(&LayerNormParams::new(48)) - 2.0 * layernorm_bound(&p)).abs() < 1e-9);
    }

    #[test]
    fn mlp_bound_identity_and_homogeneity() {
        let id = MlpParams { w1: Tensor::eye(3), b1: Tensor::zeros(&[3]), w2: Tensor::eye(3), b2: Tensor::zeros(&[3]) };
        assert!((mlp_bound(&id).unwrap() - gelu_lipschitz().unwrap()).abs() < 1e-12);
        let mut scaled = id.clone();
        scaled.w1 = scaled.w1.scale(-2.5);
        assert!((mlp_bound(&scaled).unwrap() - 2.5 * mlp_bound(&id).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn lrsa_bound_identity_example() {
        let p = AttentionParams {
            heads: 1,
            d_model: 4,
            w_q: Tensor::eye(4),
            w_k: Tensor::eye(4),
            w_v: Tensor::eye(4),
            w_o: Tensor::eye(4),
            kernel: Kernel::Lrsa,
            alpha: 100.0,
            denom_floor: 1e-12,
            tie_qk: false,
        };
        // ‖X‖_F = 10
        let x = Tensor::from_rows(&[&[6.0, 0.0, 0.0, 0.0], &[0.0, 8.0, 0.0, 0.0]]).unwrap();
        assert!((lrsa_bound(&p, &x).unwrap() - 60.0).abs() < 1e-9);
        let mut p2 = p.clone();
        p2.alpha = 200.0;
        assert!((lrsa_bound(&p2, &x).unwrap() - 120.0).abs() < 1e-9);
    }

    #[test]
    fn empirical_linear_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sampler = |r: &mut ChaCha8Rng| Tensor::randn(&[1, 5], 1.0, r);
        for norm in [Norm::L2, Norm::Inf] {
            let id = empirical_lipschitz(|x| Ok(x.clone()), sampler, 20, 1e-4, norm, &mut rng).unwrap();
            assert!((id - 1.0).abs() < 1e-9);
            let three = empirical_lipschitz(|x| Ok(x.scale(3.0)), sampler, 20, 1e-4, norm, &mut rng).unwrap();
            assert!((three - 3.0).abs() < 1e-9);
        }
        assert!(empirical_lipschitz(|x| Ok(x.clone()), sampler, 1, 0.0, Norm::L2, &mut rng).is_err());
    }

    #[test]
    fn compose_refactors() {
        let (a, b, l, m) = (3.0, 5.0, 0.7, 2.2);
        assert!((compose_layer_bound(a, b, l, m) - a * b * (1.0 + l) * (1.0 + m)).abs() < 1e-12);
        assert_eq!(compose_layer_bound(a, b, 0.0, 0.0), a * b);
    }
}

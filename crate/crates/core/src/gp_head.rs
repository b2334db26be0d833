//! Random-Fourier-feature Gaussian-process output layer with a Laplace
//! precision for input-dependent logit variance.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows_inplace, Tape, Var};
use crate::error::{Error, Result};
use crate::module::{join, Module};
use crate::tensor::{gemm_at, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub features: usize,
    pub length_scale: f64,
    pub ridge: f64,
    pub mc_samples: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig { features: 1024, length_scale: 2.0, ridge: 1.0, mc_samples: 10 }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::Config("gp.features must be positive".into()));
        }
        if !(self.length_scale > 0.0) || !(self.ridge > 0.0) {
            return Err(Error::Config("gp.length_scale and gp.ridge must be positive".into()));
        }
        Ok(())
    }
}

/// `logits(h) = Φ(h)·β` with `Φ(h) = √(2/M)·cos(h·Wᵀ + b)`.
///
/// `w` and `b` are sampled once and never trained; only `beta` carries a
/// gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct RffHeadParams {
    /// `[M, d_model]`, entries `N(0, 1)/length_scale`.
    pub w: Tensor,
    /// `[M]`, entries `U[0, 2π)`.
    pub b: Tensor,
    /// `[M, n_classes]`.
    pub beta: Tensor,
    pub length_scale: f64,
    pub ridge: f64,
    /// `[M, M]`, set by [`laplace_fit`].
    pub precision: Option<Tensor>,
}

impl RffHeadParams {
    pub fn init<R: Rng + ?Sized>(d_model: usize, n_classes: usize, cfg: &GpConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.features;
        let w = Tensor::randn(&[m, d_model], 1.0 / cfg.length_scale, rng);
        let b = Tensor::rand_uniform(&[m], 0.0, 2.0 * PI, rng);
        Ok(RffHeadParams {
            w,
            b,
            beta: Tensor::zeros(&[m, n_classes]).with_requires_grad(true),
            length_scale: cfg.length_scale,
            ridge: cfg.ridge,
            precision: None,
        })
    }

    pub fn features(&self) -> usize {
        self.w.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.beta.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.features();
        if self.w.ndim() != 2 || self.b.shape() != [m] || self.beta.ndim() != 2 || self.beta.rows() != m {
            return Err(Error::shape("rff_head", self.w.shape(), self.beta.shape()));
        }
        if let Some(p) = &self.precision {
            if p.shape() != [m, m] {
                return Err(Error::shape("rff_head.precision", p.shape(), &[m, m]));
            }
        }
        Ok(())
    }
}

impl Module for RffHeadParams {
    // Only β is a trainable parameter; W and b are frozen buffers.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

fn check_width(h: &Tensor, p: &RffHeadParams) -> Result<()> {
    if h.ndim() != 2 || h.cols() != p.w.cols() {
        return Err(Error::shape("rff_features", h.shape(), p.w.shape()));
    }
    Ok(())
}

/// Records `Φ(h)` and `Φ(h)·β` on a tape; `h` is `[B, d_model]`.
pub fn rff_on_tape(tape: &mut Tape, h: Var, p: &RffHeadParams, prefix: &str) -> Result<(Var, Var)> {
    let m = p.features();
    let wt = tape.constant(p.w.transpose()?)?;
    let b = tape.constant(p.b.clone())?;
    let z = tape.matmul(h, wt)?;
    let z = tape.add_broadcast(z, b)?;
    let c = tape.cos(z)?;
    let phi = tape.scale(c, (2.0 / m as f64).sqrt())?;
    let beta = tape.param(&join(prefix, "beta"), &p.beta)?;
    let logits = tape.matmul(phi, beta)?;
    Ok((phi, logits))
}

pub fn rff_features(h: &Tensor, p: &RffHeadParams) -> Result<Tensor> {
    check_width(h, p)?;
    let (bsz, d, m) = (h.rows(), h.cols(), p.features());
    let wt = p.w.transpose()?;
    let mut z = vec![0.0; bsz * m];
    crate::tensor::gemm(h.data(), wt.data(), &mut z, bsz, d, m);
    let scale = (2.0 / m as f64).sqrt();
    for row in z.chunks_mut(m) {
        for (v, &bj) in row.iter_mut().zip(p.b.data()) {
            *v = scale * libm::cos(*v + bj);
        }
    }
    Tensor::new(vec![bsz, m], z)
}

pub fn gp_logits(h: &Tensor, p: &RffHeadParams) -> Result<Tensor> {
    rff_features(h, p)?.matmul(&p.beta)
}

/// Streaming form of `ridge·I + Σᵢ mean_c[pᵢc(1 − pᵢc)]·Φᵢᵀ Φᵢ`, so the
/// training set can be fed in batches.
#[derive(Clone, Debug)]
pub struct LaplaceAccumulator {
    m: usize,
    ridge: f64,
    sum: Vec<f64>,
}

impl LaplaceAccumulator {
    pub fn new(m: usize, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0) {
            return Err(Error::Config(format!("ridge must be positive, got {ridge}")));
        }
        Ok(LaplaceAccumulator { m, ridge, sum: vec![0.0; m * m] })
    }

    pub fn add(&mut self, features: &Tensor, probs: &Tensor) -> Result<()> {
        if features.ndim() != 2 || probs.ndim() != 2 || features.rows() != probs.rows() || features.cols() != self.m {
            return Err(Error::shape("laplace_fit", features.shape(), probs.shape()));
        }
        let (n, m, k) = (features.rows(), self.m, probs.cols());
        let mut weighted = features.data().to_vec();
        for i in 0..n {
            let w = probs.row(i).iter().map(|p| p * (1.0 - p)).sum::<f64>() / k as f64;
            let s = w.max(0.0).sqrt();
            weighted[i * m..(i + 1) * m].iter_mut().for_each(|v| *v *= s);
        }
        gemm_at(&weighted, &weighted, &mut self.sum, m, n, m);
        Ok(())
    }

    /// Adds the ridge and checks positive definiteness.
    pub fn finish(self) -> Result<Tensor> {
        let m = self.m;
        let mut prec = self.sum;
        for j in 0..m {
            prec[j * m + j] += self.ridge;
        }
        if DMatrix::from_row_slice(m, m, &prec).cholesky().is_none() {
            return Err(not_pd());
        }
        Tensor::new(vec![m, m], prec)
    }
}

pub fn laplace_fit(features: &Tensor, probs: &Tensor, ridge: f64) -> Result<Tensor> {
    let mut acc = LaplaceAccumulator::new(features.last_dim(), ridge)?;
    acc.add(features, probs)?;
    acc.finish()
}

fn not_pd() -> Error {
    Error::Numerical("Laplace precision is not positive definite (ridge too small?)".into())
}

/// Inverse of a symmetric positive-definite precision via Cholesky.
pub fn covariance(precision: &Tensor) -> Result<Tensor> {
    let m = precision.rows();
    let mat = DMatrix::from_row_slice(m, m, precision.data());
    let chol = mat
        .cholesky()
        .ok_or_else(not_pd)?;
    let inv = chol.inverse();
    // Symmetric, so column-major storage reads as row-major.
    Tensor::new(vec![m, m], inv.as_slice().to_vec())
}

/// Per-row logit variance `v = Φ·Σ·Φᵀ` (diagonal only).
pub fn logit_variance(features: &Tensor, covariance: &Tensor) -> Result<Vec<f64>> {
    let (n, m) = (features.rows(), features.cols());
    if covariance.shape() != [m, m] {
        return Err(Error::shape("logit_variance", features.shape(), covariance.shape()));
    }
    let phi = DMatrix::from_row_slice(n, m, features.data());
    let cov = DMatrix::from_row_slice(m, m, covariance.data());
    let a = &phi * &cov;
    Ok((0..n).map(|i| a.row(i).dot(&phi.row(i)).max(0.0)).collect())
}

/// Monte-Carlo predictive distribution. For each input, `n_samples` logit
/// vectors are drawn from `N(Φβ, v·I)` and their softmaxes averaged;
/// `n_samples = 0` returns `softmax(Φβ)`.
pub fn gp_predict<R: Rng + ?Sized>(h: &Tensor, p: &RffHeadParams, n_samples: usize, rng: &mut R) -> Result<Tensor> {
    let phi = rff_features(h, p)?;
    let mean = phi.matmul(&p.beta)?;
    let var = if n_samples > 0 {
        let prec = p
            .precision
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("gp_predict needs a fitted precision when n_samples > 0".into()))?;
        logit_variance(&phi, &covariance(prec)?)?
    } else {
        vec![0.0; h.rows()]
    };
    mc_softmax(&mean, &var, n_samples, rng)
}

/// Averages `softmax(mean + √v·z)` over `n_samples` standard-normal draws.
pub fn mc_softmax<R: Rng + ?Sized>(mean: &Tensor, var: &[f64], n_samples: usize, rng: &mut R) -> Result<Tensor> {
    let (n, k) = (mean.rows(), mean.cols());
    if var.len() != n {
        return Err(Error::shape("mc_softmax", mean.shape(), &[var.len()]));
    }
    if n_samples == 0 {
        let mut out = mean.data().to_vec();
        softmax_rows_inplace(&mut out, k);
        return Tensor::new(vec![n, k], out);
    }
    let mut out = vec![0.0; n * k];
    let mut draw = vec![0.0; k];
    for i in 0..n {
        let sd = var[i].sqrt();
        for _ in 0..n_samples {
            for (c, d) in draw.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                *d = mean.get(i, c) + sd * z;
            }
            softmax_rows_inplace(&mut draw, k);
            for (o, d) in out[i * k..(i + 1) * k].iter_mut().zip(&draw) {
                *o += d;
            }
        }
        out[i * k..(i + 1) * k].iter_mut().for_each(|o| *o /= n_samples as f64);
    }
    Tensor::new(vec![n, k], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(m: usize, d: usize, c: usize, seed: u64) -> RffHeadParams {
        let cfg = GpConfig { features: m, ..GpConfig::default() };
        RffHeadParams::init(d, c, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn features_are_bounded_and_zero_input_reads_phase() {
        let p = head(64, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Tensor::randn(&[10, 3], 3.0, &mut rng);
        let phi = rff_features(&h, &p).unwrap();
        let bound = (2.0 / 64.0f64).sqrt();
        assert!(phi.data().iter().all(|v| v.abs() <= bound + 1e-15));

        let phi0 = rff_features(&Tensor::zeros(&[1, 3]), &p).unwrap();
        for (f, b) in phi0.data().iter().zip(p.b.data()) {
            assert!((f - bound * b.cos()).abs() < 1e-15);
        }
        assert!(p.b.data().iter().all(|&b| (0.0..2.0 * PI).contains(&b)));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let p = head(8, 3, 2, 1);
        assert!(rff_features(&Tensor::zeros(&[2, 4]), &p).is_err());
    }

    #[test]
    fn zero_beta_gives_uniform_and_logits_are_linear() {
        let mut p = head(16, 2, 3, 3);
        let h = Tensor::from_rows(&[&[0.3, -0.4], &[1.0, 2.0]]).unwrap();
        let l = gp_logits(&h, &p).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.0));
        let probs = gp_predict(&h, &p, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        p.beta = Tensor::randn(&[16, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let l1 = gp_logits(&h, &p).unwrap();
        p.beta = p.beta.scale(2.0);
        let l2 = gp_logits(&h, &p).unwrap();
        for (a, b) in l1.data().iter().zip(l2.data()) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn laplace_empty_and_hand_computed() {
        let empty = LaplaceAccumulator::new(3, 1.5).unwrap().finish().unwrap();
        assert_eq!(empty.data(), Tensor::eye(3).scale(1.5).data());

        let phi = Tensor::from_rows(&[&[1.0, 0.0], &[0.5, 2.0], &[-1.0, 1.0]]).unwrap();
        let probs = Tensor::from_rows(&[&[0.5, 0.5], &[0.9, 0.1], &[1.0, 0.0]]).unwrap();
        let prec = laplace_fit(&phi, &probs, 1.0).unwrap();
        // weights: 0.25, 0.09, 0
        let expected = [
            1.0 + 0.25 + 0.09 * 0.25,
            0.09 * 1.0,
            0.09 * 1.0,
            1.0 + 0.09 * 4.0,
        ];
        for (a, b) in prec.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn mc_rows_are_distributions_and_zero_variance_is_softmax() {
        let mean = Tensor::from_rows(&[&[2.0, -1.0], &[0.0, 0.5]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let exact = mc_softmax(&mean, &[0.0, 0.0], 0, &mut rng).unwrap();
        let degenerate = mc_softmax(&mean, &[0.0, 0.0], 10, &mut rng).unwrap();
        for (a, b) in exact.data().iter().zip(degenerate.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let noisy = mc_softmax(&mean, &[4.0, 1.0], 10, &mut rng).unwrap();
        for r in 0..2 {
            assert!((noisy.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_without_precision_errors() {
        let p = head(8, 2, 2, 1);
        assert!(gp_predict(&Tensor::zeros(&[1, 2]), &p, 10, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn covariance_inverts_precision() {
        let prec = Tensor::from_rows(&[&[4.0, 1.0], &[1.0, 3.0]]).unwrap();
        let cov = covariance(&prec).unwrap();
        let prod = prec.matmul(&cov).unwrap();
        for (a, b) in prod.data().iter().zip(Tensor::eye(2).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

//! SGD with momentum, AdamW and the warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::module::Module;
use crate::tensor::Tensor;

/// Linear ramp `0 → base_lr` over `warmup_steps`, then half-cosine decay to
/// 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + libm::cos(PI * progress))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adamw {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::SgdMomentum { momentum: default_momentum() }
    }
}

impl OptimizerConfig {
    pub fn adamw() -> Self {
        OptimizerConfig::Adamw { beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::SgdMomentum { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adamw { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Weight decay touches weight matrices only; biases, norm gains,
/// positional/CLS embeddings and the GP output weights are left alone.
pub fn decays(name: &str, t: &Tensor) -> bool {
    t.ndim() == 2 && !name.ends_with("pos") && !name.ends_with("beta")
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    weight_decay: f64,
    steps: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, weight_decay: f64) -> Result<Self> {
        config.validate()?;
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {weight_decay}")));
        }
        Ok(Optimizer { config, weight_decay, steps: 0, first: BTreeMap::new(), second: BTreeMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradient buffers of `model`. Tensors
    /// without a gradient buffer are skipped.
    pub fn step(&mut self, model: &mut dyn Module, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let (config, wd) = (self.config.clone(), self.weight_decay);
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut("", &mut |name, p| {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { return };
            let decay = if decays(name, p) { wd } else { 0.0 };
            let m = first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            match config {
                OptimizerConfig::SgdMomentum { momentum } => {
                    for ((w, gi), mi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()) {
                        let gi = gi + decay * *w;
                        *mi = momentum * *mi + gi;
                        *w -= lr * *mi;
                    }
                }
                OptimizerConfig::Adamw { beta1, beta2, eps } => {
                    let v = second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *w -= lr * decay * *w;
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::join;

    struct One(Tensor);

    impl Module for One {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
            f(&join(prefix, "w"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f(&join(prefix, "w"), &mut self.0);
        }
    }

    #[test]
    fn schedule_landmarks() {
        assert_eq!(cosine_lr(5, 105, 0.01, 5), 0.01);
        assert!(cosine_lr(105, 105, 0.01, 5).abs() < 1e-18);
        assert!((cosine_lr(55, 105, 0.01, 5) - 0.005).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 105, 0.01, 5), 0.0);
        let mut prev = f64::INFINITY;
        for s in 5..=105 {
            let lr = cosine_lr(s, 105, 0.01, 5);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!((cosine_lr(4, 105, 0.01, 5) - 0.008).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_matches_hand_rollout() {
        let mut m = One(Tensor::from_rows(&[&[1.0]]).unwrap().with_requires_grad(true));
        let mut opt = Optimizer::new(OptimizerConfig::default(), 0.1).unwrap();
        // grad 0.5 twice; coupled decay adds 0.1·w.
        m.0.accumulate_grad(&Tensor::from_rows(&[&[0.5]]).unwrap()).unwrap();
        opt.step(&mut m, 0.1);
        let g1 = 0.5 + 0.1 * 1.0;
        let w1 = 1.0 - 0.1 * g1;
        assert!((m.0.data()[0] - w1).abs() < 1e-15);
        opt.step(&mut m, 0.1);
        let b2 = 0.9 * g1 + (0.5 + 0.1 * w1);
        assert!((m.0.data()[0] - (w1 - 0.1 * b2)).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_sign_sized() {
        let mut m = One(Tensor::from_rows(&[&[2.0, -3.0]]).unwrap().with_requires_grad(true));
        let mut opt = Optimizer::new(OptimizerConfig::adamw(), 0.0).unwrap();
        m.0.accumulate_grad(&Tensor::from_rows(&[&[0.3, -7.0]]).unwrap()).unwrap();
        opt.step(&mut m, 0.01);
        assert!((m.0.data()[0] - 1.99).abs() < 1e-7);
        assert!((m.0.data()[1] + 2.99).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut m = One(Tensor::from_rows(&[&[2.0, -3.0]]).unwrap().with_requires_grad(true));
        m.0.accumulate_grad(&Tensor::zeros(&[1, 2])).unwrap();
        for cfg in [OptimizerConfig::default(), OptimizerConfig::adamw()] {
            let mut opt = Optimizer::new(cfg, 0.0).unwrap();
            opt.step(&mut m, 0.1);
            assert_eq!(m.0.data(), &[2.0, -3.0]);
        }
    }

    #[test]
    fn decay_selection() {
        let w = Tensor::zeros(&[2, 2]);
        assert!(decays("layers.0.attn.w_q", &w));
        assert!(!decays("embed.pos", &w));
        assert!(!decays("head.beta", &w));
        assert!(!decays("layers.0.mlp.b1", &Tensor::zeros(&[2])));
    }
}

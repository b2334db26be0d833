//! LayerNorm, the GeLU MLP and the post-norm LRFormer layer.

use rand::Rng;

use crate::attention::{self, AttentionParams, BoundAttention, Kernel};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::module::{join, Module};
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn new(width: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(&[width]).with_requires_grad(true),
            beta: Tensor::zeros(&[width]).with_requires_grad(true),
            epsilon: DEFAULT_LN_EPS,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("layer norm epsilon must be positive, got {}", self.epsilon)));
        }
        if self.gamma.shape() != self.beta.shape() || self.gamma.ndim() != 1 {
            return Err(Error::shape("layer_norm", self.gamma.shape(), self.beta.shape()));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<(Var, Var)> {
        Ok((
            tape.param(&join(prefix, "gamma"), &self.gamma)?,
            tape.param(&join(prefix, "beta"), &self.beta)?,
        ))
    }
}

impl Module for LayerNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// LayerNorm over the last axis of `x`.
pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    p.validate()?;
    if x.last_dim() != p.width() {
        return Err(Error::shape("layer_norm", x.shape(), p.gamma.shape()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let (g, b) = (tape.constant(p.gamma.clone())?, tape.constant(p.beta.clone())?);
    let y = tape.layer_norm(xv, g, b, p.epsilon)?;
    Ok(tape.value(y).detached())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    pub fn init<R: Rng + ?Sized>(d_model: usize, d_ff: usize, std: f64, rng: &mut R) -> Self {
        MlpParams {
            w1: Tensor::randn(&[d_model, d_ff], std, rng).with_requires_grad(true),
            b1: Tensor::zeros(&[d_ff]).with_requires_grad(true),
            w2: Tensor::randn(&[d_ff, d_model], std, rng).with_requires_grad(true),
            b2: Tensor::zeros(&[d_model]).with_requires_grad(true),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w1, w2) = (self.w1.shape(), self.w2.shape());
        let ok = w1.len() == 2
            && w2.len() == 2
            && w1[1] == w2[0]
            && self.b1.shape() == [w1[1]]
            && self.b2.shape() == [w2[1]];
        if !ok {
            return Err(Error::shape("mlp", w1, w2));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<BoundMlp> {
        Ok(BoundMlp {
            w1: tape.param(&join(prefix, "w1"), &self.w1)?,
            b1: tape.param(&join(prefix, "b1"), &self.b1)?,
            w2: tape.param(&join(prefix, "w2"), &self.w2)?,
            b2: tape.param(&join(prefix, "b2"), &self.b2)?,
        })
    }
}

impl Module for MlpParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w1"), &self.w1);
        f(&join(prefix, "b1"), &self.b1);
        f(&join(prefix, "w2"), &self.w2);
        f(&join(prefix, "b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `gelu(x·W1 + b1)·W2 + b2` applied to the last axis of `x`.
pub fn mlp_on_tape(tape: &mut Tape, x: Var, w: &BoundMlp) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let d = *s.last().unwrap();
    let rows = s.iter().product::<usize>() / d;
    let x2 = tape.reshape(x, &[rows, d])?;
    let h = tape.matmul(x2, w.w1)?;
    let h = tape.add_broadcast(h, w.b1)?;
    let h = tape.gelu(h)?;
    let y = tape.matmul(h, w.w2)?;
    let y = tape.add_broadcast(y, w.b2)?;
    let out_d = tape.shape(y)[1];
    let mut out_shape = s;
    *out_shape.last_mut().unwrap() = out_d;
    tape.reshape(y, &out_shape)
}

pub fn mlp_forward(x: &Tensor, p: &MlpParams) -> Result<Tensor> {
    p.validate()?;
    if x.last_dim() != p.w1.rows() {
        return Err(Error::shape("mlp", x.shape(), p.w1.shape()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let w = BoundMlp {
        w1: tape.constant(p.w1.clone())?,
        b1: tape.constant(p.b1.clone())?,
        w2: tape.constant(p.w2.clone())?,
        b2: tape.constant(p.b2.clone())?,
    };
    let y = mlp_on_tape(&mut tape, xv, &w)?;
    Ok(tape.value(y).detached())
}

/// One post-norm layer: `u = LN₁(x + Attn(x))`, `y = LN₂(u + MLP(u))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub mlp: MlpParams,
    pub ln2: LayerNormParams,
}

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(
        d_model: usize,
        heads: usize,
        d_ff: usize,
        kernel: Kernel,
        alpha: f64,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LayerParams {
            attn: AttentionParams::init(d_model, heads, kernel, alpha, std, rng)?,
            ln1: LayerNormParams::new(d_model),
            mlp: MlpParams::init(d_model, d_ff, std, rng),
            ln2: LayerNormParams::new(d_model),
        })
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<BoundLayer> {
        Ok(BoundLayer {
            attn: self.attn.bind(tape, &join(prefix, "attn"))?,
            ln1: self.ln1.bind(tape, &join(prefix, "ln1"))?,
            mlp: self.mlp.bind(tape, &join(prefix, "mlp"))?,
            ln2: self.ln2.bind(tape, &join(prefix, "ln2"))?,
        })
    }
}

impl Module for LayerParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub attn: BoundAttention,
    pub ln1: (Var, Var),
    pub mlp: BoundMlp,
    pub ln2: (Var, Var),
}

/// Tape values of one layer forward.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub attn: attention::AttentionVars,
    /// `LN₁(x + Attn(x))`, reused by both branches of the second half.
    pub inner: Var,
    pub output: Var,
}

pub fn layer_on_tape(tape: &mut Tape, x: Var, p: &LayerParams, w: &BoundLayer) -> Result<LayerVars> {
    let attn = attention::forward_on_tape(tape, x, &p.attn, &w.attn)?;
    let r1 = tape.add(x, attn.output)?;
    let inner = tape.layer_norm(r1, w.ln1.0, w.ln1.1, p.ln1.epsilon)?;
    let m = mlp_on_tape(tape, inner, &w.mlp)?;
    let r2 = tape.add(inner, m)?;
    let output = tape.layer_norm(r2, w.ln2.0, w.ln2.1, p.ln2.epsilon)?;
    Ok(LayerVars { attn, inner, output })
}

/// Layer forward for one sequence (`n × d_model`) or a batch (`B × n × d_model`).
pub fn lrformer_layer(x: &Tensor, p: &LayerParams) -> Result<Tensor> {
    let batched = match x.ndim() {
        2 => x.reshape(&[1, x.rows(), x.cols()])?,
        3 => x.clone(),
        _ => return Err(Error::invalid_shape("lrformer_layer", x.shape(), "expected 2-D or 3-D input")),
    };
    let mut tape = Tape::new();
    let xv = tape.constant(batched)?;
    let w = p.bind(&mut tape, "")?;
    let out = layer_on_tape(&mut tape, xv, p, &w)?;
    tape.value(out.output).reshape(x.shape())
}

//! Point embedding, the layer stack and the classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Kernel, DEFAULT_DENOM_FLOOR};
use crate::autodiff::{Tape, Var};
use crate::blocks::{layer_on_tape, LayerParams, LayerVars, DEFAULT_LN_EPS};
use crate::error::{Error, Result};
use crate::gp_head::{self, GpConfig, RffHeadParams};
use crate::module::{join, Module};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Dense,
    Gp,
}

/// Init scale of the two-moons preset. At the usual 0.02 the input signal
/// reaching the CLS token through nine layers is ~1% of its norm and SGD at
/// lr 0.01 never leaves the uniform-prediction plateau.
pub const TWO_MOONS_INIT_STD: f64 = 0.2;

fn default_init_std() -> f64 {
    0.02
}
fn default_ln_eps() -> f64 {
    DEFAULT_LN_EPS
}
fn default_denom_floor() -> f64 {
    DEFAULT_DENOM_FLOOR
}
fn default_alpha() -> f64 {
    100.0
}
fn default_classes() -> usize {
    2
}
fn default_head() -> HeadKind {
    HeadKind::Gp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// No default: a config that omits the kernel is rejected.
    pub kernel: Kernel,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub n_tokens: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_head")]
    pub head_kind: HeadKind,
    #[serde(default)]
    pub gp: GpConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_denom_floor")]
    pub denom_floor: f64,
    #[serde(default)]
    pub tie_qk: bool,
    /// Input feature width (2 for planar points).
    #[serde(default = "default_in_features")]
    pub in_features: usize,
}

fn default_in_features() -> usize {
    2
}

impl ModelConfig {
    /// The two-moons architecture: depth 9, width 24, 8 heads, GP head,
    /// initialised at [`TWO_MOONS_INIT_STD`].
    pub fn two_moons() -> Self {
        ModelConfig {
            depth: 9,
            d_model: 24,
            heads: 8,
            d_ff: 48,
            kernel: Kernel::Lrsa,
            alpha: default_alpha(),
            n_tokens: 4,
            n_classes: 2,
            head_kind: HeadKind::Gp,
            gp: GpConfig::default(),
            seed: 0,
            init_std: TWO_MOONS_INIT_STD,
            ln_eps: DEFAULT_LN_EPS,
            denom_floor: DEFAULT_DENOM_FLOOR,
            tie_qk: false,
            in_features: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("n_tokens", self.n_tokens),
            ("n_classes", self.n_classes),
            ("in_features", self.in_features),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.kernel == Kernel::Lrsa && !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive for lrsa, got {}", self.alpha)));
        }
        if !(self.ln_eps > 0.0) || !(self.denom_floor > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("ln_eps and denom_floor must be positive, init_std non-negative".into()));
        }
        if self.head_kind == HeadKind::Gp {
            self.gp.validate()?;
        }
        Ok(())
    }
}

/// Each point is mapped through `n_tokens` affine maps, a CLS token is
/// prepended and positional embeddings are added.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams {
    /// `[in_features, n_tokens·d_model]`
    pub w: Tensor,
    /// `[n_tokens·d_model]`
    pub b: Tensor,
    /// `[d_model]`
    pub cls: Tensor,
    /// `[n_tokens + 1, d_model]`
    pub pos: Tensor,
}

impl Module for EmbedParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
        f(&join(prefix, "cls"), &self.cls);
        f(&join(prefix, "pos"), &self.pos);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
        f(&join(prefix, "cls"), &mut self.cls);
        f(&join(prefix, "pos"), &mut self.pos);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseHead {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Dense(DenseHead),
    Gp(RffHeadParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: EmbedParams,
    pub layers: Vec<LayerParams>,
    pub head: Head,
}

/// Tape handles of one model forward.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[B, n_tokens+1, d_model]` embedded sequence.
    pub embedded: Var,
    pub layers: Vec<LayerVars>,
    /// `[B, d_model]` CLS representation fed to the head.
    pub features: Var,
    /// Random features for the GP head.
    pub phi: Option<Var>,
    pub logits: Var,
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with(config, &mut rng)
    }

    pub fn init_with<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, t, std) = (config.d_model, config.n_tokens, config.init_std);
        let embed = EmbedParams {
            w: Tensor::randn(&[config.in_features, t * d], std, rng).with_requires_grad(true),
            b: Tensor::zeros(&[t * d]).with_requires_grad(true),
            cls: Tensor::randn(&[d], std, rng).with_requires_grad(true),
            pos: Tensor::randn(&[t + 1, d], std, rng).with_requires_grad(true),
        };
        let mut layers = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let mut layer = LayerParams::init(d, config.heads, config.d_ff, config.kernel, config.alpha, std, rng)?;
            layer.attn.denom_floor = config.denom_floor;
            layer.attn.tie_qk = config.tie_qk;
            layer.ln1.epsilon = config.ln_eps;
            layer.ln2.epsilon = config.ln_eps;
            layers.push(layer);
        }
        let head = match config.head_kind {
            HeadKind::Dense => Head::Dense(DenseHead {
                w: Tensor::randn(&[d, config.n_classes], std, rng).with_requires_grad(true),
                b: Tensor::zeros(&[config.n_classes]).with_requires_grad(true),
            }),
            HeadKind::Gp => Head::Gp(RffHeadParams::init(d, config.n_classes, &config.gp, rng)?),
        };
        Ok(Model { config, embed, layers, head })
    }

    pub fn gp(&self) -> Option<&RffHeadParams> {
        match &self.head {
            Head::Gp(p) => Some(p),
            Head::Dense(_) => None,
        }
    }

    pub fn gp_mut(&mut self) -> Option<&mut RffHeadParams> {
        match &mut self.head {
            Head::Gp(p) => Some(p),
            Head::Dense(_) => None,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.config.in_features {
            return Err(Error::invalid_shape(
                "model_forward",
                x.shape(),
                format!("expected [batch, {}]", self.config.in_features),
            ));
        }
        Ok(())
    }

    /// Records the embedding `[B, n_tokens+1, d_model]` of `x` (`[B, in_features]`).
    pub fn embed_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (d, t) = (self.config.d_model, self.config.n_tokens);
        let bsz = tape.shape(x)[0];
        let w = tape.param("embed.w", &self.embed.w)?;
        let b = tape.param("embed.b", &self.embed.b)?;
        let cls = tape.param("embed.cls", &self.embed.cls)?;
        let pos = tape.param("embed.pos", &self.embed.pos)?;
        let tok = tape.matmul(x, w)?;
        let tok = tape.add_broadcast(tok, b)?;
        let tok = tape.reshape(tok, &[bsz, t, d])?;
        let seq = tape.prepend_row(tok, cls)?;
        tape.add_broadcast(seq, pos)
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, x: &Tensor) -> Result<ForwardVars> {
        self.check_input(x)?;
        let xv = tape.constant(x.clone())?;
        let embedded = self.embed_on_tape(tape, xv)?;
        let mut h = embedded;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer.bind(tape, &format!("layers.{i}"))?;
            let out = layer_on_tape(tape, h, layer, &w)?;
            h = out.output;
            layers.push(out);
        }
        let features = tape.select_row(h, 0)?;
        let (phi, logits) = match &self.head {
            Head::Dense(p) => {
                let w = tape.param("head.w", &p.w)?;
                let b = tape.param("head.b", &p.b)?;
                let l = tape.matmul(features, w)?;
                (None, tape.add_broadcast(l, b)?)
            }
            Head::Gp(p) => {
                let (phi, l) = gp_head::rff_on_tape(tape, features, p, "head")?;
                (Some(phi), l)
            }
        };
        Ok(ForwardVars { embedded, layers, features, phi, logits })
    }

    pub fn embed_points(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let e = self.embed_on_tape(&mut tape, xv)?;
        Ok(tape.value(e).detached())
    }

    /// `[B, n_classes]` mean logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward_on_tape(&mut tape, x)?;
        Ok(tape.value(f.logits).detached())
    }

    /// `[B, d_model]` CLS representations.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward_on_tape(&mut tape, x)?;
        Ok(tape.value(f.features).detached())
    }

    /// Class probabilities. The GP head averages `n_samples` Monte-Carlo
    /// draws when a precision has been fitted; otherwise (and for the dense
    /// head) this is the softmax of the mean logits.
    pub fn predict_proba<R: Rng + ?Sized>(&self, x: &Tensor, n_samples: usize, rng: &mut R) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward_on_tape(&mut tape, x)?;
        let mean = tape.value(f.logits);
        let var = match (&self.head, f.phi) {
            (Head::Gp(p), Some(phi)) if n_samples > 0 => match &p.precision {
                Some(prec) => Some(gp_head::logit_variance(tape.value(phi), &gp_head::covariance(prec)?)?),
                None => None,
            },
            _ => None,
        };
        match var {
            Some(v) => gp_head::mc_softmax(mean, &v, n_samples, rng),
            None => gp_head::mc_softmax(mean, &vec![0.0; mean.rows()], 0, rng),
        }
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        match &self.head {
            Head::Dense(p) => {
                f(&join(prefix, "head.w"), &p.w);
                f(&join(prefix, "head.b"), &p.b);
            }
            Head::Gp(p) => p.visit(&join(prefix, "head"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        match &mut self.head {
            Head::Dense(p) => {
                f(&join(prefix, "head.w"), &mut p.w);
                f(&join(prefix, "head.b"), &mut p.b);
            }
            Head::Gp(p) => p.visit_mut(&join(prefix, "head"), f),
        }
    }
}

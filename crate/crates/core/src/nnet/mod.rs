//! Windowed autoregressive policy and token-level critic.
//!
//! Both models read the last `window` tokens of `prompt ++ response-prefix`
//! (left-padded with `PAD`) through one of two backbones: a lookup table or a
//! single-hidden-layer network. The policy head emits one logit per vocabulary
//! token; the critic head emits one logit squashed into (0, 1).

mod checkpoint;
mod mlp;
mod tabular;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use mlp::Mlp;
pub use tabular::Tabular;

use crate::error::{Error, Result};
use crate::scalar::{log_softmax, sigmoid, softmax, Scalar};
use crate::taskgen::{TokenId, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Tabular,
    Mlp,
}

/// Architecture hyper-parameters shared by policy and critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub backend: Backend,
    pub window: usize,
    /// Embedding width (mlp only).
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Hidden width (mlp only).
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_dim() -> usize {
    8
}
fn default_hidden() -> usize {
    32
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { backend: Backend::Tabular, window: 4, dim: default_dim(), hidden: default_hidden() }
    }
}

impl NetConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("context window must be >= 1".into()));
        }
        if self.backend == Backend::Mlp && (self.dim == 0 || self.hidden == 0) {
            return Err(Error::Config("mlp dim and hidden must be >= 1".into()));
        }
        if self.backend == Backend::Tabular && (vocab as f64).powi(self.window as i32) >= 2f64.powi(63) {
            return Err(Error::Config(format!("tabular key space {vocab}^{} overflows", self.window)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Net<F> {
    Tabular(Tabular<F>),
    Mlp(Mlp<F>),
}

impl<F: Scalar> Net<F> {
    pub fn zeros(cfg: &NetConfig, vocab: usize, out: usize) -> Self {
        match cfg.backend {
            Backend::Tabular => Net::Tabular(Tabular::zeros(vocab, cfg.window, out)),
            Backend::Mlp => Net::Mlp(Mlp::zeros(vocab, cfg.window, cfg.dim, cfg.hidden, out)),
        }
    }

    /// Default initialization: tabular zeros, mlp small uniform weights.
    pub fn init<R: Rng>(cfg: &NetConfig, vocab: usize, out: usize, init_scale: f64, rng: &mut R) -> Self {
        match cfg.backend {
            Backend::Tabular => Self::zeros(cfg, vocab, out),
            Backend::Mlp => Net::Mlp(Mlp::random(vocab, cfg.window, cfg.dim, cfg.hidden, out, init_scale, rng)),
        }
    }

    pub fn config(&self) -> NetConfig {
        match self {
            Net::Tabular(t) => NetConfig { backend: Backend::Tabular, window: t.window, ..NetConfig::default() },
            Net::Mlp(m) => NetConfig { backend: Backend::Mlp, window: m.window, dim: m.dim, hidden: m.hidden },
        }
    }

    pub fn window(&self) -> usize {
        match self {
            Net::Tabular(t) => t.window,
            Net::Mlp(m) => m.window,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            Net::Tabular(t) => t.vocab,
            Net::Mlp(m) => m.vocab,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Net::Tabular(t) => t.out,
            Net::Mlp(m) => m.out,
        }
    }

    fn check_ctx(&self, ctx: &[TokenId]) -> Result<()> {
        if ctx.len() != self.window() {
            return Err(Error::Internal(format!("context length {} != window {}", ctx.len(), self.window())));
        }
        if let Some(&t) = ctx.iter().find(|&&t| t as usize >= self.vocab()) {
            return Err(Error::InvalidInput(format!("token {t} outside vocabulary of {}", self.vocab())));
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &[TokenId]) -> Vec<F> {
        match self {
            Net::Tabular(t) => t.forward(ctx),
            Net::Mlp(m) => m.forward(ctx),
        }
    }

    pub fn backward(&self, ctx: &[TokenId], dout: &[F], grad: &mut Net<F>) -> Result<()> {
        match (self, grad) {
            (Net::Tabular(p), Net::Tabular(g)) => p.backward(ctx, dout, g),
            (Net::Mlp(p), Net::Mlp(g)) => p.backward(ctx, dout, g),
            _ => return Err(Error::Shape("gradient backend differs from parameter backend".into())),
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Net::Tabular(t) => Net::Tabular(Tabular::zeros(t.vocab, t.window, t.out)),
            Net::Mlp(m) => Net::Mlp(Mlp::zeros(m.vocab, m.window, m.dim, m.hidden, m.out)),
        }
    }

    pub fn same_shape(&self, other: &Net<F>) -> bool {
        match (self, other) {
            (Net::Tabular(a), Net::Tabular(b)) => (a.vocab, a.window, a.out) == (b.vocab, b.window, b.out),
            (Net::Mlp(a), Net::Mlp(b)) => (a.vocab, a.window, a.dim, a.hidden, a.out) == (b.vocab, b.window, b.dim, b.hidden, b.out),
            _ => false,
        }
    }

    /// Creates zero rows so that every tabular row present in `other` is present here.
    pub(crate) fn materialize_like(&mut self, other: &Net<F>) {
        if let (Net::Tabular(a), Net::Tabular(b)) = (self, other) {
            for k in b.rows.keys() {
                a.rows.entry(*k).or_insert_with(|| vec![F::zero(); b.out]);
            }
        }
    }

    /// Parameter blocks in a fixed order (tabular rows by key).
    pub fn blocks(&self) -> Vec<&[F]> {
        match self {
            Net::Tabular(t) => t.rows.values().map(Vec::as_slice).collect(),
            Net::Mlp(m) => m.slices().to_vec(),
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [F]> {
        match self {
            Net::Tabular(t) => t.rows.values_mut().map(Vec::as_mut_slice).collect(),
            Net::Mlp(m) => m.slices_mut().into_iter().collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn scale(&mut self, s: F) {
        for b in self.blocks_mut() {
            for x in b.iter_mut() {
                *x = *x * s;
            }
        }
    }

    /// `self += other` (shapes must match).
    pub fn add_assign(&mut self, other: &Net<F>) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("cannot add differently shaped parameter sets".into()));
        }
        self.materialize_like(other);
        match (self, other) {
            (Net::Tabular(a), Net::Tabular(b)) => {
                for (k, row) in &b.rows {
                    for (x, &y) in a.rows.get_mut(k).expect("materialized").iter_mut().zip(row) {
                        *x = *x + y;
                    }
                }
            }
            (Net::Mlp(a), Net::Mlp(b)) => {
                for (xa, xb) in a.slices_mut().into_iter().zip(b.slices()) {
                    for (x, &y) in xa.iter_mut().zip(xb) {
                        *x = *x + y;
                    }
                }
            }
            _ => unreachable!("checked by same_shape"),
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> F {
        self.blocks().iter().flat_map(|b| b.iter()).map(|&x| x * x).sum()
    }
}

/// Last `window` tokens of `prompt ++ prefix`, left-padded with `PAD`.
pub fn context(prompt: &[TokenId], prefix: &[TokenId], window: usize) -> Vec<TokenId> {
    let mut ctx = vec![PAD; window];
    let total = prompt.len() + prefix.len();
    let take = total.min(window);
    for i in 0..take {
        let pos = total - take + i;
        ctx[window - take + i] = if pos < prompt.len() { prompt[pos] } else { prefix[pos - prompt.len()] };
    }
    ctx
}

/// Autoregressive policy πθ(y_t | x, y_<t).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<F> {
    pub net: Net<F>,
}

/// Token-level critic Vφ(x, y_1:t) ∈ (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams<F> {
    pub net: Net<F>,
}

/// Gradient accumulator mirroring a parameter container.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer<F> {
    pub net: Net<F>,
    pub count: usize,
}

impl<F: Scalar> GradBuffer<F> {
    pub fn for_net(net: &Net<F>) -> Self {
        Self { net: net.zeros_like(), count: 0 }
    }

    pub fn check_shape(&self, net: &Net<F>) -> Result<()> {
        if self.net.same_shape(net) {
            Ok(())
        } else {
            Err(Error::Shape("gradient buffer does not match parameters".into()))
        }
    }
}

/// Sampling temperature; `Greedy` decodes the argmax without consuming randomness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temperature {
    Sample(f64),
    Greedy,
}

impl<F: Scalar> PolicyParams<F> {
    pub fn new(net: Net<F>) -> Self {
        Self { net }
    }

    pub fn init<R: Rng>(cfg: &NetConfig, vocab: usize, init_scale: f64, rng: &mut R) -> Result<Self> {
        cfg.validate(vocab)?;
        Ok(Self { net: Net::init(cfg, vocab, vocab, init_scale, rng) })
    }

    pub fn window(&self) -> usize {
        self.net.window()
    }

    pub fn vocab(&self) -> usize {
        self.net.vocab()
    }

    pub fn grad_buffer(&self) -> GradBuffer<F> {
        GradBuffer::for_net(&self.net)
    }

    /// Logits for a context window. Shorter contexts are left-padded; longer
    /// ones are rejected.
    pub fn logits(&self, ctx: &[TokenId]) -> Result<Vec<F>> {
        if ctx.len() > self.window() {
            return Err(Error::Internal(format!("context of {} tokens exceeds window {}", ctx.len(), self.window())));
        }
        let ctx = context(ctx, &[], self.window());
        self.net.check_ctx(&ctx)?;
        Ok(self.net.forward(&ctx))
    }

    /// Total and per-token log πθ(y|x).
    pub fn sequence_logprob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<(F, Vec<F>)> {
        if response.is_empty() {
            return Err(Error::InvalidInput("empty response".into()));
        }
        let w = self.window();
        let per: Vec<F> = (0..response.len())
            .map(|t| {
                let ctx = context(prompt, &response[..t], w);
                self.net.check_ctx(&ctx)?;
                let y = response[t] as usize;
                if y >= self.vocab() {
                    return Err(Error::InvalidInput(format!("token {y} outside vocabulary")));
                }
                Ok(log_softmax(&self.net.forward(&ctx))[y])
            })
            .collect::<Result<_>>()?;
        Ok((per.iter().copied().sum(), per))
    }

    /// Ancestral sampling until `EOS` or `max_len` tokens.
    pub fn sample_response<R: Rng>(&self, prompt: &[TokenId], max_len: usize, temperature: Temperature, rng: &mut R) -> Vec<TokenId> {
        let w = self.window();
        let mut out = Vec::with_capacity(max_len);
        while out.len() < max_len {
            let logits = self.net.forward(&context(prompt, &out, w));
            let tok = match temperature {
                Temperature::Greedy => argmax(&logits),
                Temperature::Sample(tau) => {
                    let scaled: Vec<F> = logits.iter().map(|&z| z / F::of(tau)).collect();
                    sample_categorical(&softmax(&scaled), rng.gen::<f64>())
                }
            };
            out.push(tok as TokenId);
            if tok as TokenId == EOS {
                break;
            }
        }
        out
    }

    /// Adds `Σ_t weight_t · ∂ log π(y_t | ·)/∂θ` into `grad`.
    pub fn accumulate_logprob_grad(&self, prompt: &[TokenId], response: &[TokenId], weights: &[F], grad: &mut GradBuffer<F>) -> Result<()> {
        if weights.len() != response.len() {
            return Err(Error::Shape(format!("{} weights for {} tokens", weights.len(), response.len())));
        }
        grad.check_shape(&self.net)?;
        let w = self.window();
        for (t, &wt) in weights.iter().enumerate() {
            if wt == F::zero() {
                continue;
            }
            let ctx = context(prompt, &response[..t], w);
            let p = softmax(&self.net.forward(&ctx));
            let y = response[t] as usize;
            let dlogits: Vec<F> = p.iter().enumerate().map(|(k, &pk)| wt * (if k == y { F::one() } else { F::zero() } - pk)).collect();
            self.net.backward(&ctx, &dlogits, &mut grad.net)?;
        }
        grad.count += 1;
        Ok(())
    }

    /// Adds `dlogits · ∂logits(ctx)/∂θ` into `grad`.
    pub fn accumulate_logit_grad(&self, ctx: &[TokenId], dlogits: &[F], grad: &mut GradBuffer<F>) -> Result<()> {
        grad.check_shape(&self.net)?;
        self.net.check_ctx(ctx)?;
        self.net.backward(ctx, dlogits, &mut grad.net)
    }
}

impl<F: Scalar> CriticParams<F> {
    pub fn new(net: Net<F>) -> Self {
        Self { net }
    }

    pub fn init<R: Rng>(cfg: &NetConfig, vocab: usize, init_scale: f64, rng: &mut R) -> Result<Self> {
        cfg.validate(vocab)?;
        Ok(Self { net: Net::init(cfg, vocab, 1, init_scale, rng) })
    }

    pub fn window(&self) -> usize {
        self.net.window()
    }

    pub fn grad_buffer(&self) -> GradBuffer<F> {
        GradBuffer::for_net(&self.net)
    }

    /// Value of the state reached after `prefix`.
    pub fn value(&self, prompt: &[TokenId], prefix: &[TokenId]) -> F {
        sigmoid(self.net.forward(&context(prompt, prefix, self.window()))[0])
    }

    /// `V(x, y_1:t)` for `t = 1..=T`.
    pub fn values(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<F>> {
        if response.is_empty() {
            return Err(Error::InvalidInput("empty response".into()));
        }
        Ok((1..=response.len()).map(|t| self.value(prompt, &response[..t])).collect())
    }

    /// `V(x, y_1:t)` for `t = 0..=T`, starting from the prompt-only state.
    pub fn state_values(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<F>> {
        if response.is_empty() {
            return Err(Error::InvalidInput("empty response".into()));
        }
        Ok((0..=response.len()).map(|t| self.value(prompt, &response[..t])).collect())
    }

    /// Adds `Σ_t dvalue_t · ∂V(x, y_1:t)/∂φ` for `t = 0..=T` into `grad`.
    pub fn accumulate_value_grad(&self, prompt: &[TokenId], response: &[TokenId], dvalues: &[F], grad: &mut GradBuffer<F>) -> Result<()> {
        if dvalues.len() != response.len() + 1 {
            return Err(Error::Shape(format!("{} value gradients for {} states", dvalues.len(), response.len() + 1)));
        }
        grad.check_shape(&self.net)?;
        let w = self.window();
        for (t, &dv) in dvalues.iter().enumerate() {
            if dv == F::zero() {
                continue;
            }
            let ctx = context(prompt, &response[..t], w);
            let v = sigmoid(self.net.forward(&ctx)[0]);
            self.net.backward(&ctx, &[dv * v * (F::one() - v)], &mut grad.net)?;
        }
        grad.count += 1;
        Ok(())
    }
}

pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `probs` with a uniform `u ∈ [0, 1)`.
pub fn sample_categorical<F: Scalar>(probs: &[F], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > F::zero()).unwrap_or(probs.len() - 1)
}

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::nnet::{context, CriticParams, GradBuffer, PolicyParams};
use crate::scalar::{log_softmax, Scalar};
use crate::taskgen::TokenId;

/// Sequence-level ratio mask. A sequence whose geometric-mean importance
/// ratio leaves `[1 − low, 1 + high]` contributes nothing. The default bounds
/// mirror the large-scale recipe and are only meaningful for off-policy epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceClip {
    pub enabled: bool,
    pub low: f64,
    pub high: f64,
}

impl Default for SequenceClip {
    fn default() -> Self {
        Self { enabled: false, low: 3e-4, high: 5e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    /// Token-level ratio clip ε; `None` disables clipping.
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub sequence: SequenceClip,
    /// Coefficient of the per-token KL(π‖π_ref) penalty.
    #[serde(default)]
    pub kl_coef: f64,
    /// Coefficient of the per-token entropy bonus.
    #[serde(default)]
    pub entropy_coef: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { epsilon: Some(0.2), sequence: SequenceClip::default(), kl_coef: 0.0, entropy_coef: 0.0 }
    }
}

impl ClipConfig {
    pub fn disabled() -> Self {
        Self { epsilon: None, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PolicyLossStats {
    pub tokens: usize,
    pub clipped_tokens: usize,
    pub masked_sequences: usize,
    pub mean_ratio: f64,
}

/// Weighted log-likelihood policy loss
/// `−mean_t [w_t · A_t · log πθ(y_t | x, y_<t)]` and its gradient.
///
/// `w_t` is the importance ratio `πθ/π_behavior`, treated as a constant and
/// zeroed where PPO clipping is active, so the gradient equals that of the
/// clipped surrogate `−mean_t min(r_t A_t, clip(r_t) A_t)`. On-policy with
/// clipping off, `w_t = 1`.
pub fn policy_loss_and_grad<F: Scalar>(
    policy: &PolicyParams<F>,
    batch: &[Trajectory<F>],
    clip: &ClipConfig,
    reference: Option<&PolicyParams<F>>,
) -> Result<(F, GradBuffer<F>, PolicyLossStats)> {
    if clip.kl_coef != 0.0 && reference.is_none() {
        return Err(Error::Config("kl_coef set without a reference policy".into()));
    }
    for tr in batch {
        tr.check()?;
        if tr.advantages.is_none() {
            return Err(Error::Contract(format!("trajectory of task {} has no advantages", tr.task_id)));
        }
    }
    let n_tok: usize = batch.iter().map(|t| t.len()).sum();
    let mut grad = policy.grad_buffer();
    if n_tok == 0 {
        return Ok((F::zero(), grad, PolicyLossStats::default()));
    }
    let scale = F::one() / F::of(n_tok as f64);
    let w = policy.window();

    // Per-trajectory gradients in parallel, reduced in batch order.
    let parts: Vec<(F, GradBuffer<F>, usize, bool, F)> = batch
        .par_iter()
        .map(|tr| -> Result<_> {
            let adv = tr.advantages.as_ref().expect("checked");
            let mut g = policy.grad_buffer();
            let mut loss = F::zero();
            let mut clipped = 0;
            let mut ratio_sum = F::zero();
            let mut dlogit_rows: Vec<(Vec<TokenId>, Vec<F>)> = Vec::with_capacity(tr.len());
            let mut log_ratio_sum = F::zero();
            let mut token_terms = Vec::with_capacity(tr.len());
            for (t, &a) in adv.iter().enumerate() {
                let ctx = context(&tr.prompt, &tr.response[..t], w);
                let logits = policy.net.forward(&ctx);
                let logp = log_softmax(&logits);
                let y = tr.response[t] as usize;
                let lp = logp[y];
                let ratio = (lp - tr.behavior_logprobs[t]).exp();
                log_ratio_sum = log_ratio_sum + (lp - tr.behavior_logprobs[t]);
                ratio_sum = ratio_sum + ratio;
                let active = match clip.epsilon {
                    Some(eps) => {
                        let eps = F::of(eps);
                        !((a > F::zero() && ratio > F::one() + eps) || (a < F::zero() && ratio < F::one() - eps))
                    }
                    None => true,
                };
                if !active {
                    clipped += 1;
                }
                let weight = if active { ratio } else { F::zero() };
                token_terms.push((ctx, logp, y, weight * a));
            }
            let seq_ratio = (log_ratio_sum / F::of(tr.len() as f64)).exp();
            let masked = clip.sequence.enabled && (seq_ratio < F::of(1.0 - clip.sequence.low) || seq_ratio > F::of(1.0 + clip.sequence.high));
            for (ctx, logp, y, wa) in token_terms {
                let p: Vec<F> = logp.iter().map(|&l| l.exp()).collect();
                let mut dlogits = vec![F::zero(); p.len()];
                if !masked && wa != F::zero() {
                    loss = loss - wa * logp[y] * scale;
                    // d/dz of −wa·log p_y = −wa (onehot_y − p)
                    for (k, d) in dlogits.iter_mut().enumerate() {
                        let onehot = if k == y { F::one() } else { F::zero() };
                        *d = *d - wa * (onehot - p[k]) * scale;
                    }
                }
                if clip.entropy_coef != 0.0 {
                    let c = F::of(clip.entropy_coef);
                    let h: F = -p.iter().zip(&logp).map(|(&pk, &lk)| pk * lk).sum::<F>();
                    loss = loss - c * h * scale;
                    // dH/dz_k = −p_k (log p_k + H)
                    for (k, d) in dlogits.iter_mut().enumerate() {
                        *d = *d + c * p[k] * (logp[k] + h) * scale;
                    }
                }
                if clip.kl_coef != 0.0 {
                    let c = F::of(clip.kl_coef);
                    let logq = log_softmax(&reference.expect("checked").net.forward(&ctx));
                    let kl: F = p.iter().zip(logp.iter().zip(&logq)).map(|(&pk, (&lp, &lq))| pk * (lp - lq)).sum();
                    loss = loss + c * kl * scale;
                    // dKL/dz_k = p_k (log p_k − log q_k − KL)
                    for (k, d) in dlogits.iter_mut().enumerate() {
                        *d = *d + c * p[k] * (logp[k] - logq[k] - kl) * scale;
                    }
                }
                if dlogits.iter().any(|&d| d != F::zero()) {
                    dlogit_rows.push((ctx, dlogits));
                }
            }
            for (ctx, d) in &dlogit_rows {
                policy.net.backward(ctx, d, &mut g.net)?;
            }
            Ok((loss, g, clipped, masked, ratio_sum))
        })
        .collect::<Result<_>>()?;

    let mut loss = F::zero();
    let mut stats = PolicyLossStats { tokens: n_tok, ..Default::default() };
    let mut ratio_sum = F::zero();
    for (l, g, clipped, masked, rs) in parts {
        loss = loss + l;
        grad.net.add_assign(&g.net)?;
        stats.clipped_tokens += clipped;
        stats.masked_sequences += masked as usize;
        ratio_sum = ratio_sum + rs;
    }
    grad.count = batch.len();
    stats.mean_ratio = ratio_sum.as_f64() / n_tok as f64;
    Ok((loss, grad, stats))
}

/// A labeled rollout for critic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticSample {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub correct: Option<bool>,
}

/// Token-level MSE `mean_{i,t} (V(x_i, y_i,1:t) − I_i)²` over every state
/// `t = 0..=T` of every response, with its gradient.
pub fn critic_loss_and_grad<F: Scalar>(critic: &CriticParams<F>, batch: &[CriticSample]) -> Result<(F, GradBuffer<F>)> {
    for s in batch {
        if s.correct.is_none() {
            return Err(Error::Contract("critic sample without verifier correctness".into()));
        }
        if s.response.is_empty() {
            return Err(Error::InvalidInput("empty response in critic batch".into()));
        }
    }
    let n_states: usize = batch.iter().map(|s| s.response.len() + 1).sum();
    let mut grad = critic.grad_buffer();
    if n_states == 0 {
        return Ok((F::zero(), grad));
    }
    let scale = F::one() / F::of(n_states as f64);
    let parts: Vec<(F, GradBuffer<F>)> = batch
        .par_iter()
        .map(|s| -> Result<_> {
            let target = if s.correct.expect("checked") { F::one() } else { F::zero() };
            let values = critic.state_values(&s.prompt, &s.response)?;
            let mut loss = F::zero();
            let dv: Vec<F> = values
                .iter()
                .map(|&v| {
                    let e = v - target;
                    loss = loss + e * e * scale;
                    F::of(2.0) * e * scale
                })
                .collect();
            let mut g = critic.grad_buffer();
            critic.accumulate_value_grad(&s.prompt, &s.response, &dv, &mut g)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut loss = F::zero();
    for (l, g) in parts {
        loss = loss + l;
        grad.net.add_assign(&g.net)?;
    }
    grad.count = batch.len();
    Ok((loss, grad))
}

//! Shared helpers for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempo_core::nnet::{context, Backend, CriticParams, Net, NetConfig, PolicyParams};
use tempo_core::rlcore::{critic_loss_and_grad, policy_loss_and_grad, ClipConfig, CriticSample, Trajectory};
use tempo_core::scalar::log_softmax;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
const VOCAB: usize = 7;

fn cfg(rng: &mut ChaCha8Rng) -> NetConfig {
    NetConfig { backend: Backend::Mlp, window: rng.gen_range(1..=4), dim: rng.gen_range(1..=3), hidden: rng.gen_range(2..=5) }
}

fn tokens(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<u32> {
    (0..rng.gen_range(lo..=hi)).map(|_| rng.gen_range(1..VOCAB as u32)).collect()
}

/// Central-difference gradient of `f` over every parameter of `net`.
fn fd_grad(net: &Net<f64>, f: impl Fn(&Net<f64>) -> f64) -> Vec<f64> {
    let n_blocks = net.blocks().len();
    let mut out = Vec::new();
    let mut probe = net.clone();
    for b in 0..n_blocks {
        for i in 0..net.blocks()[b].len() {
            let orig = probe.blocks()[b][i];
            probe.blocks_mut()[b][i] = orig + H;
            let up = f(&probe);
            probe.blocks_mut()[b][i] = orig - H;
            let down = f(&probe);
            probe.blocks_mut()[b][i] = orig;
            out.push((up - down) / (2.0 * H));
        }
    }
    out
}

fn flat(net: &Net<f64>) -> Vec<f64> {
    net.blocks().into_iter().flat_map(|b| b.iter().copied()).collect()
}

/// Relative L2 error between an analytic and a numeric gradient.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Relative errors of the weighted sequence log-prob gradient on `n` random instances.
pub fn logprob_errors(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c = cfg(&mut rng);
            let policy = PolicyParams::<f64>::init(&c, VOCAB, 1.5, &mut rng).unwrap();
            let prompt = tokens(&mut rng, 1, 5);
            let response = tokens(&mut rng, 1, 4);
            let weights: Vec<f64> = (0..response.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = policy.grad_buffer();
            policy.accumulate_logprob_grad(&prompt, &response, &weights, &mut g).unwrap();
            let numeric = fd_grad(&policy.net, |net| {
                let p = PolicyParams::new(net.clone());
                let (_, lp) = p.sequence_logprob(&prompt, &response).unwrap();
                lp.iter().zip(&weights).map(|(l, w)| l * w).sum()
            });
            rel_error(&flat(&g.net), &numeric)
        })
        .collect()
}

/// Relative errors of the critic MSE gradient on `n` random instances.
pub fn critic_errors(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c = cfg(&mut rng);
            let critic = CriticParams::<f64>::init(&c, VOCAB, 1.5, &mut rng).unwrap();
            let batch: Vec<CriticSample> = (0..rng.gen_range(1..4))
                .map(|_| CriticSample { prompt: tokens(&mut rng, 1, 4), response: tokens(&mut rng, 1, 4), correct: Some(rng.gen_bool(0.5)) })
                .collect();
            let (_, g) = critic_loss_and_grad(&critic, &batch).unwrap();
            let numeric = fd_grad(&critic.net, |net| critic_loss_and_grad(&CriticParams::new(net.clone()), &batch).unwrap().0);
            rel_error(&flat(&g.net), &numeric)
        })
        .collect()
}

/// Clipped surrogate with entropy bonus and KL penalty, evaluated directly.
fn surrogate(policy: &PolicyParams<f64>, reference: &PolicyParams<f64>, batch: &[Trajectory<f64>], clip: &ClipConfig) -> f64 {
    let eps = clip.epsilon.unwrap_or(f64::INFINITY);
    let n_tok: usize = batch.iter().map(|t| t.len()).sum();
    let mut total = 0.0;
    for tr in batch {
        let adv = tr.advantages.as_ref().unwrap();
        for t in 0..tr.len() {
            let ctx = context(&tr.prompt, &tr.response[..t], policy.window());
            let logp = log_softmax(&policy.logits(&ctx).unwrap());
            let logq = log_softmax(&reference.logits(&ctx).unwrap());
            let r = (logp[tr.response[t] as usize] - tr.behavior_logprobs[t]).exp();
            let a = adv[t];
            total -= (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a);
            let h: f64 = -logp.iter().map(|l| l.exp() * l).sum::<f64>();
            let kl: f64 = logp.iter().zip(&logq).map(|(l, q)| l.exp() * (l - q)).sum();
            total += -clip.entropy_coef * h + clip.kl_coef * kl;
        }
    }
    total / n_tok as f64
}

/// Relative errors of the clipped surrogate gradient (with entropy bonus and
/// KL penalty) on `n` random instances away from the clip kink.
pub fn surrogate_errors(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let c = cfg(&mut rng);
        let policy = PolicyParams::<f64>::init(&c, VOCAB, 1.5, &mut rng).unwrap();
        let reference = PolicyParams::<f64>::init(&c, VOCAB, 1.5, &mut rng).unwrap();
        let clip =
            ClipConfig { epsilon: Some(0.2), entropy_coef: rng.gen_range(0.0..0.1), kl_coef: rng.gen_range(0.0..0.1), ..ClipConfig::default() };
        let batch: Vec<Trajectory<f64>> = (0..rng.gen_range(1..4))
            .map(|i| {
                let prompt = tokens(&mut rng, 1, 4);
                let response = tokens(&mut rng, 1, 4);
                let (_, lp) = policy.sequence_logprob(&prompt, &response).unwrap();
                // Off-policy behaviour so that some tokens land in the clipped region.
                let behavior: Vec<f64> = lp.iter().map(|l| l + rng.gen_range(-0.4..0.4)).collect();
                let t = response.len();
                Trajectory {
                    task_id: i,
                    prompt,
                    response,
                    behavior_logprobs: behavior,
                    values: vec![0.0; t],
                    reward: 0.0,
                    correct: None,
                    advantages: Some((0..t).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                }
            })
            .collect();
        // Finite differences are meaningless across the clip kink.
        let near_kink = batch.iter().any(|tr| {
            let (_, lp) = policy.sequence_logprob(&tr.prompt, &tr.response).unwrap();
            lp.iter().zip(&tr.behavior_logprobs).any(|(l, b)| {
                let r = (l - b).exp();
                (r - 0.8).abs() < 1e-3 || (r - 1.2).abs() < 1e-3
            })
        });
        if near_kink {
            continue;
        }
        let (_, g, _) = policy_loss_and_grad(&policy, &batch, &clip, Some(&reference)).unwrap();
        let numeric = fd_grad(&policy.net, |net| surrogate(&PolicyParams::new(net.clone()), &reference, &batch, &clip));
        out.push(rel_error(&flat(&g.net), &numeric));
    }
    out
}

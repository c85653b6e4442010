//! Metrics, evaluation, run configuration and persistence, experiment
//! orchestration, comparison tables and plots.

mod compare;
mod config;
mod log;
mod plot;
mod run;

use std::collections::BTreeMap;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use compare::{compare, load_summary, CompareReport, RunSummary};
pub use config::{EvalConfig, ModelConfig, RunConfig};
pub use log::{read_metric_log, LogHeader, MetricLog, SCHEMA, SCHEMA_VERSION};
pub use plot::{emit_plots, PlotReport};
pub use run::{evaluate_checkpoint, run_experiment, run_stage1, run_stage2, RunData};

use crate::error::{Error, Result};
use crate::nnet::{PolicyParams, Temperature};
use crate::rng::{stream_id, stream_rng};
use crate::scalar::Scalar;
use crate::taskgen::{verify, Access, Task};

const PHASE_EVAL: u8 = 7;

/// Mean over tasks of the fraction correct among the first `k` draws.
pub fn avg_at_k(samples: &[Vec<bool>], k: usize) -> Result<f64> {
    if samples.is_empty() || k == 0 {
        return Err(Error::InvalidInput("avg@k needs tasks and k >= 1".into()));
    }
    let mut total = 0.0;
    for s in samples {
        if s.len() < k {
            return Err(Error::InvalidInput(format!("avg@{k} with only {} samples", s.len())));
        }
        total += s[..k].iter().filter(|&&c| c).count() as f64 / k as f64;
    }
    Ok(total / samples.len() as f64)
}

fn check_pass_args(n: usize, c: usize, k: usize) -> Result<()> {
    if c > n || k == 0 || k > n {
        return Err(Error::InvalidInput(format!("pass@k needs 0 <= c <= n and 1 <= k <= n (n={n}, c={c}, k={k})")));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k as u128 {
        // acc·(n−k+i) is divisible by i at every step
        acc = acc.checked_mul(n as u128 - k as u128 + i)? / i;
    }
    Some(acc)
}

/// `1 − C(n−c, k)/C(n, k)` as an exact fraction, when the binomials fit.
pub fn pass_at_k_exact(n: usize, c: usize, k: usize) -> Result<Ratio<u128>> {
    check_pass_args(n, c, k)?;
    let total = binomial(n, k).ok_or_else(|| Error::InvalidInput(format!("C({n}, {k}) overflows")))?;
    let miss = binomial(n - c, k).expect("C(n-c, k) <= C(n, k)");
    Ok(Ratio::new(total - miss, total))
}

/// Unbiased pass@k from `c` correct among `n` samples. Exact integer
/// binomials with a single rounding when they are representable, the
/// log-space product otherwise.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    check_pass_args(n, c, k)?;
    if n - c < k {
        return Ok(1.0);
    }
    const EXACT: u128 = 1 << 53;
    if let Some(total) = binomial(n, k).filter(|&t| t <= EXACT) {
        let miss = binomial(n - c, k).expect("smaller binomial");
        return Ok((total - miss) as f64 / total as f64);
    }
    let log_miss: f64 = (0..k).map(|i| ((n - c - i) as f64).ln() - ((n - i) as f64).ln()).sum();
    Ok(-log_miss.exp_m1())
}

/// Shannon entropy (nats) of the empirical answer distribution; malformed
/// responses (`None`) form one bucket of their own.
pub fn answer_entropy(answers: &[Option<u64>]) -> f64 {
    if answers.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<Option<u64>, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(*a).or_default() += 1;
    }
    let n = answers.len() as f64;
    let h: f64 = counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum();
    h.max(0.0)
}

/// One evaluation snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Samples per task.
    pub n: usize,
    /// Correct samples per task, in task order.
    pub correct: Vec<usize>,
    pub avg_at_k: BTreeMap<usize, f64>,
    pub pass_at_k: BTreeMap<usize, f64>,
    /// Mean over tasks of the answer entropy of the `n` samples (nats).
    pub answer_entropy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_loss: Option<f64>,
    /// Exact `J(θ)` on the evaluated tasks (the tight ELBO), when the oracle is attached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_objective: Option<f64>,
    /// Kept out of metric logs so that reruns stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl EvalRecord {
    pub fn avg(&self, k: usize) -> Option<f64> {
        self.avg_at_k.get(&k).copied()
    }

    pub fn pass(&self, k: usize) -> Option<f64> {
        self.pass_at_k.get(&k).copied()
    }
}

/// Draws `cfg.n` responses per task and scores them with evaluation-scoped
/// gold access. Sample `j` of task `i` uses its own random stream, shared by
/// every evaluation point of a run so that curves use common random numbers.
pub fn evaluate<F: Scalar>(policy: &PolicyParams<F>, tasks: &[Task], cfg: &EvalConfig, max_len: usize, seed: u64, step: usize) -> Result<EvalRecord> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidInput("evaluation over no tasks".into()));
    }
    let temperature = if cfg.temperature <= 0.0 { Temperature::Greedy } else { Temperature::Sample(cfg.temperature) };
    let n = cfg.n;
    let per_task: Vec<(Vec<bool>, Vec<Option<u64>>)> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let mut correct = Vec::with_capacity(n);
            let mut answers = Vec::with_capacity(n);
            for j in 0..n {
                let mut rng = stream_rng(seed, stream_id(PHASE_EVAL, 0, (i * n + j) as u64));
                let y = policy.sample_response(&task.prompt, max_len, temperature, &mut rng);
                correct.push(verify(task, &y, Access::Evaluation)?);
                answers.push(task.extract_answer(&y));
            }
            Ok((correct, answers))
        })
        .collect::<Result<_>>()?;
    let samples: Vec<Vec<bool>> = per_task.iter().map(|(c, _)| c.clone()).collect();
    let counts: Vec<usize> = samples.iter().map(|s| s.iter().filter(|&&c| c).count()).collect();
    let mut avg = BTreeMap::new();
    let mut pass = BTreeMap::new();
    for &k in &cfg.ks {
        avg.insert(k, avg_at_k(&samples, k)?);
        let p: f64 = counts.iter().map(|&c| pass_at_k(n, c, k)).sum::<Result<f64>>()?;
        pass.insert(k, p / tasks.len() as f64);
    }
    let entropy = per_task.iter().map(|(_, a)| answer_entropy(a)).sum::<f64>() / tasks.len() as f64;
    Ok(EvalRecord {
        step,
        n,
        correct: counts,
        avg_at_k: avg,
        pass_at_k: pass,
        answer_entropy: entropy,
        actor_loss: None,
        critic_loss: None,
        exact_objective: None,
        wall_clock_s: None,
    })
}

//! Brute-force ground truth on tiny instances: the exact objective, the exact
//! posterior over correct responses, ELBO and KL.
//!
//! Everything here enumerates the full response space of the sampler
//! (`PolicyParams::sample_response` with the same `max_len`), so the masses
//! of all enumerated responses sum to one.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nnet::{context, CriticParams, Net, PolicyParams};
use crate::rlcore::{OptimizerConfig, OptimizerState};
use crate::scalar::{log_softmax, Scalar};
use crate::taskgen::{Access, Task, TokenId, EOS};

/// Default refusal threshold for enumeration.
pub const MAX_SPACE: u128 = 10_000_000;

/// All responses the sampler can produce: `ℓ − 1` non-`EOS` tokens followed
/// by `EOS` for `ℓ = 1..=L`, plus the `L`-token tails that never emit `EOS`.
/// Stored in depth-first order, tokens ascending at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSpace {
    vocab: usize,
    max_len: usize,
    sequences: Vec<Vec<TokenId>>,
}

impl ResponseSpace {
    /// `Σ_{ℓ=1..L} (V−1)^(ℓ−1) + (V−1)^L`.
    pub fn size_of(vocab: usize, max_len: usize) -> u128 {
        let c = vocab.saturating_sub(1) as u128;
        let mut total: u128 = 0;
        let mut pow: u128 = 1;
        for _ in 0..max_len {
            total = total.saturating_add(pow);
            pow = pow.saturating_mul(c);
        }
        total.saturating_add(pow)
    }

    pub fn new(vocab: usize, max_len: usize) -> Result<Self> {
        Self::with_cap(vocab, max_len, MAX_SPACE)
    }

    pub fn with_cap(vocab: usize, max_len: usize, cap: u128) -> Result<Self> {
        if vocab <= EOS as usize || max_len == 0 {
            return Err(Error::InvalidInput(format!("response space needs vocab > {EOS} and max_len >= 1")));
        }
        let size = Self::size_of(vocab, max_len);
        if size > cap {
            return Err(Error::SpaceTooLarge { size, cap });
        }
        let mut sequences = Vec::with_capacity(size as usize);
        let mut prefix = Vec::with_capacity(max_len);
        walk(vocab, max_len, &mut prefix, &mut |y| sequences.push(y.to_vec()));
        debug_assert_eq!(sequences.len() as u128, size);
        Ok(Self { vocab, max_len, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.sequences
    }

    fn check<F: Scalar>(&self, policy: &PolicyParams<F>) -> Result<()> {
        if policy.vocab() != self.vocab {
            return Err(Error::Shape(format!("policy vocabulary {} vs response space {}", policy.vocab(), self.vocab)));
        }
        Ok(())
    }
}

fn walk(vocab: usize, max_len: usize, prefix: &mut Vec<TokenId>, leaf: &mut impl FnMut(&[TokenId])) {
    for tok in 0..vocab as TokenId {
        prefix.push(tok);
        if tok == EOS || prefix.len() == max_len {
            leaf(prefix);
        } else {
            walk(vocab, max_len, prefix, leaf);
        }
        prefix.pop();
    }
}

fn node_logp<F: Scalar>(policy: &PolicyParams<F>, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
    log_softmax(&policy.net.forward(&context(prompt, prefix, policy.window()))).iter().map(|x| x.as_f64()).collect()
}

fn logprob_dfs<F: Scalar>(policy: &PolicyParams<F>, prompt: &[TokenId], max_len: usize, prefix: &mut Vec<TokenId>, base: f64, out: &mut Vec<f64>) {
    let logp = node_logp(policy, prompt, prefix);
    for (tok, lp) in logp.iter().enumerate() {
        prefix.push(tok as TokenId);
        if tok as TokenId == EOS || prefix.len() == max_len {
            out.push(base + lp);
        } else {
            logprob_dfs(policy, prompt, max_len, prefix, base + lp, out);
        }
        prefix.pop();
    }
}

/// `log πθ(y|x)` for every response of the space, in space order.
pub fn response_logprobs<F: Scalar>(policy: &PolicyParams<F>, prompt: &[TokenId], space: &ResponseSpace) -> Result<Vec<f64>> {
    space.check(policy)?;
    let root = node_logp(policy, prompt, &[]);
    let parts: Vec<Vec<f64>> = (0..space.vocab)
        .into_par_iter()
        .map(|tok| {
            let mut prefix = vec![tok as TokenId];
            if tok as TokenId == EOS || space.max_len == 1 {
                return vec![root[tok]];
            }
            let mut out = Vec::new();
            logprob_dfs(policy, prompt, space.max_len, &mut prefix, root[tok], &mut out);
            out
        })
        .collect();
    Ok(parts.concat())
}

/// Verifier indicator for every response (evaluation-scoped gold access).
pub fn correct_mask(task: &Task, space: &ResponseSpace) -> Result<Vec<bool>> {
    let gold = task.gold_answer(Access::Evaluation)?;
    Ok(space.sequences.iter().map(|y| task.extract_answer(y) == Some(gold)).collect())
}

/// A distribution over the responses of one space, dense in space order.
#[derive(Debug, Clone, PartialEq)]
pub struct QDistribution {
    pub task_id: u64,
    pub mass: Vec<f64>,
}

impl QDistribution {
    /// Checks non-negativity and normalization to 1e-10.
    pub fn new(task_id: u64, mass: Vec<f64>) -> Result<Self> {
        if mass.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(Error::InvalidInput("q has a negative or non-finite mass".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("q sums to {total}")));
        }
        Ok(Self { task_id, mass })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(task_id: u64, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::Undefined(format!("weights of task {task_id} sum to {total}")));
        }
        Self::new(task_id, weights.into_iter().map(|w| w / total).collect())
    }

    /// `(index, mass)` of every response with positive mass.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.mass.iter().copied().enumerate().filter(|&(_, m)| m > 0.0)
    }

    /// Human-readable dump of the support.
    pub fn dump(&self, space: &ResponseSpace) -> String {
        let mut s = format!("task {}\n", self.task_id);
        for (i, m) in self.support() {
            s.push_str(&format!("{:?}\t{m:.12}\n", space.sequences[i]));
        }
        s
    }

    fn check(&self, space: &ResponseSpace) -> Result<()> {
        if self.mass.len() != space.len() {
            return Err(Error::Shape(format!("q over {} responses, space has {}", self.mass.len(), space.len())));
        }
        Ok(())
    }
}

/// `P(Correct | x; θ) = Σ_y I(y) πθ(y|x)`.
pub fn exact_marginal<F: Scalar>(policy: &PolicyParams<F>, task: &Task, space: &ResponseSpace) -> Result<f64> {
    let lp = response_logprobs(policy, &task.prompt, space)?;
    let mask = correct_mask(task, space)?;
    Ok(lp.iter().zip(&mask).filter(|(_, &c)| c).map(|(l, _)| l.exp()).sum::<f64>().clamp(0.0, 1.0))
}

/// `J(θ) = mean_x log P(Correct | x; θ)`. A zero marginal is reported as
/// [`Error::NegInfinity`] naming the task.
pub fn exact_objective<F: Scalar>(policy: &PolicyParams<F>, tasks: &[Task], space: &ResponseSpace) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("objective over no tasks".into()));
    }
    let logs: Vec<f64> = tasks
        .iter()
        .map(|t| {
            let p = exact_marginal(policy, t, space)?;
            if p > 0.0 {
                Ok(p.ln())
            } else {
                Err(Error::NegInfinity { task_id: t.id })
            }
        })
        .collect::<Result<_>>()?;
    Ok(logs.iter().sum::<f64>() / tasks.len() as f64)
}

/// `q*(y|x) = I(y) πθ(y|x) / P(Correct|x)`.
pub fn exact_posterior<F: Scalar>(policy: &PolicyParams<F>, task: &Task, space: &ResponseSpace) -> Result<QDistribution> {
    let lp = response_logprobs(policy, &task.prompt, space)?;
    let mask = correct_mask(task, space)?;
    let w: Vec<f64> = lp.iter().zip(&mask).map(|(l, &c)| if c { l.exp() } else { 0.0 }).collect();
    QDistribution::from_weights(task.id, w).map_err(|_| Error::Undefined(format!("posterior of task {} with zero marginal", task.id)))
}

/// `Σ_y q(y) log[I(y) πθ(y|x) / q(y)]` with `0 · log(0/0) = 0`. Mass on an
/// incorrect or impossible response gives `−∞`.
pub fn elbo<F: Scalar>(q: &QDistribution, policy: &PolicyParams<F>, task: &Task, space: &ResponseSpace) -> Result<f64> {
    q.check(space)?;
    let lp = response_logprobs(policy, &task.prompt, space)?;
    let mask = correct_mask(task, space)?;
    let mut total = 0.0;
    for (i, m) in q.support() {
        if !mask[i] || lp[i] == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        total += m * (lp[i] - m.ln());
    }
    Ok(total)
}

/// `KL(p ‖ q)` over aligned masses, `+∞` when `p` leaves the support of `q`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            total += a * (a / b).ln();
        }
    }
    total.max(0.0)
}

/// `KL(q ‖ P(y | x, Correct))`.
pub fn kl_q_posterior<F: Scalar>(q: &QDistribution, policy: &PolicyParams<F>, task: &Task, space: &ResponseSpace) -> Result<f64> {
    q.check(space)?;
    let post = exact_posterior(policy, task, space)?;
    Ok(kl(&q.mass, &post.mass))
}

/// `KL(P(y | x, Correct) ‖ q)`: finite for any `q` that covers every correct
/// response, which is how critic reweightings are compared.
pub fn kl_posterior_q<F: Scalar>(q: &QDistribution, policy: &PolicyParams<F>, task: &Task, space: &ResponseSpace) -> Result<f64> {
    q.check(space)?;
    let post = exact_posterior(policy, task, space)?;
    Ok(kl(&post.mass, &q.mass))
}

/// `q(y|x) ∝ w(y) πθ(y|x)` for arbitrary non-negative response weights.
pub fn reweighted<F: Scalar>(
    policy: &PolicyParams<F>,
    task: &Task,
    space: &ResponseSpace,
    weight: impl Fn(&[TokenId]) -> f64 + Sync,
) -> Result<QDistribution> {
    let lp = response_logprobs(policy, &task.prompt, space)?;
    let w: Vec<f64> = space.sequences.par_iter().zip(&lp).map(|(y, l)| weight(y) * l.exp()).collect();
    if w.iter().any(|x| *x < 0.0) {
        return Err(Error::InvalidInput("negative response weight".into()));
    }
    QDistribution::from_weights(task.id, w)
}

/// `q(y|x) ∝ V_φ(x, y) πθ(y|x)`, the critic-reweighted policy.
pub fn critic_q<F: Scalar>(critic: &CriticParams<F>, policy: &PolicyParams<F>, task: &Task, space: &ResponseSpace) -> Result<QDistribution> {
    reweighted(policy, task, space, |y| critic.value(&task.prompt, y).as_f64())
}

/// One node of the response trie.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixStat {
    pub prefix: Vec<TokenId>,
    /// Probability that a sampled response starts with `prefix`.
    pub visit: f64,
    /// `P(Correct | x, prefix)`.
    pub p_correct: f64,
}

fn prefix_dfs<F: Scalar>(
    policy: &PolicyParams<F>,
    task: &Task,
    gold: u64,
    max_len: usize,
    prefix: &mut Vec<TokenId>,
    visit: f64,
    out: &mut Vec<PrefixStat>,
) -> f64 {
    let slot = out.len();
    out.push(PrefixStat { prefix: prefix.clone(), visit, p_correct: 0.0 });
    let done = prefix.last() == Some(&EOS) || prefix.len() == max_len;
    let mass = if done {
        if task.extract_answer(prefix) == Some(gold) {
            visit
        } else {
            0.0
        }
    } else {
        let logp = node_logp(policy, &task.prompt, prefix);
        let mut m = 0.0;
        for (tok, lp) in logp.iter().enumerate() {
            prefix.push(tok as TokenId);
            m += prefix_dfs(policy, task, gold, max_len, prefix, visit * lp.exp(), out);
            prefix.pop();
        }
        m
    };
    out[slot].p_correct = if visit > 0.0 { (mass / visit).clamp(0.0, 1.0) } else { 0.0 };
    mass
}

/// Visitation probability and exact correctness probability of every prefix,
/// from the empty prefix down to complete responses.
pub fn prefix_table<F: Scalar>(policy: &PolicyParams<F>, task: &Task, space: &ResponseSpace) -> Result<Vec<PrefixStat>> {
    space.check(policy)?;
    let gold = task.gold_answer(Access::Evaluation)?;
    let mut out = Vec::new();
    prefix_dfs(policy, task, gold, space.max_len, &mut Vec::new(), 1.0, &mut out);
    Ok(out)
}

/// Tabular policy whose every row reachable from `tasks` within `max_len`
/// tokens holds independent `U(−scale, scale)` logits.
pub fn random_tabular_policy<R: Rng>(
    window: usize,
    vocab: usize,
    tasks: &[Task],
    max_len: usize,
    scale: f64,
    rng: &mut R,
) -> Result<PolicyParams<f64>> {
    let cfg = crate::nnet::NetConfig { backend: crate::nnet::Backend::Tabular, window, ..Default::default() };
    cfg.validate(vocab)?;
    let mut net = Net::<f64>::zeros(&cfg, vocab, vocab);
    let Net::Tabular(tab) = &mut net else { unreachable!() };
    let space = ResponseSpace::new(vocab, max_len)?;
    for task in tasks {
        let mut prefixes: Vec<Vec<TokenId>> = vec![Vec::new()];
        for y in space.sequences() {
            for t in 1..y.len() {
                prefixes.push(y[..t].to_vec());
            }
        }
        prefixes.sort();
        prefixes.dedup();
        for p in prefixes {
            let row = tab.row_mut(&context(&task.prompt, &p, window));
            for x in row.iter_mut() {
                *x = rng.gen_range(-scale..scale);
            }
        }
    }
    Ok(PolicyParams::new(net))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEmConfig {
    pub iterations: usize,
    /// Gradient-ascent steps on the weighted log-likelihood per M-step.
    pub inner_steps: usize,
    pub lr: f64,
}

impl Default for OracleEmConfig {
    fn default() -> Self {
        Self { iterations: 50, inner_steps: 1, lr: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEmTrace {
    /// `J(θ_k)` for `k = 0..=iterations`.
    pub objective: Vec<f64>,
    /// `mean_x ELBO(q_k, θ_{k+1})`, a lower bound on `J(θ_{k+1})`.
    pub elbo: Vec<f64>,
}

/// Exact EM: the E-step sets `q_k` to the exact posterior under `θ_k`; the
/// M-step takes full-batch gradient-ascent steps on
/// `mean_x Σ_y q_k(y|x) log πθ(y|x)`.
pub fn oracle_em_run<F: Scalar>(
    policy: &PolicyParams<F>,
    tasks: &[Task],
    space: &ResponseSpace,
    cfg: &OracleEmConfig,
) -> Result<(PolicyParams<F>, OracleEmTrace)> {
    let mut policy = policy.clone();
    let mut opt = OptimizerState::new(OptimizerConfig::sgd(cfg.lr));
    let mut trace = OracleEmTrace { objective: vec![exact_objective(&policy, tasks, space)?], elbo: Vec::new() };
    let n = F::of(tasks.len() as f64);
    for k in 0..cfg.iterations {
        let posts: Vec<QDistribution> = tasks.iter().map(|t| exact_posterior(&policy, t, space)).collect::<Result<_>>()?;
        for _ in 0..cfg.inner_steps {
            let mut grad = policy.grad_buffer();
            for (task, q) in tasks.iter().zip(&posts) {
                for (i, m) in q.support() {
                    let y = &space.sequences[i];
                    // descend on the negated objective
                    let w = vec![F::of(-m) / n; y.len()];
                    policy.accumulate_logprob_grad(&task.prompt, y, &w, &mut grad)?;
                }
            }
            opt.step(&mut policy.net, &grad).map_err(|e| match e {
                Error::Numerical { msg, .. } => Error::Numerical { step: k, msg },
                other => other,
            })?;
        }
        let e: f64 = tasks.iter().zip(&posts).map(|(t, q)| elbo(q, &policy, t, space)).sum::<Result<f64>>()? / tasks.len() as f64;
        trace.elbo.push(e);
        trace.objective.push(exact_objective(&policy, tasks, space)?);
    }
    Ok((policy, trace))
}

/// Outcome of one invariant check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// The oracle invariants on a tiny instance (modulus 3, depth 1, responses of
/// up to four tokens): the ELBO bound for `random_q` random distributions,
/// tightness at the posterior, the ELBO + KL decomposition, posterior
/// recovery by an exact critic, Monte-Carlo agreement of the marginal, and
/// monotone exact EM.
pub fn check_invariants(seed: u64, random_q: usize) -> Result<Vec<Check>> {
    use crate::nnet::{Backend, NetConfig};
    use crate::taskgen::{gen_tasks, GeneratorConfig, Op, Vocab};
    use rand::SeedableRng;

    const TOL: f64 = 1e-9;
    const WINDOW: usize = 8;
    let gen = GeneratorConfig { modulus: 3, operand_range: [0, 2], depth: 1, operators: vec![Op::Add], count: 3, seed };
    let tasks = gen_tasks(&gen)?;
    let vocab = Vocab::for_configs(&[&gen])?.size();
    let max_len = 4;
    let space = ResponseSpace::new(vocab, max_len)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let policies: Vec<PolicyParams<f64>> =
        (0..4).map(|i| random_tabular_policy(WINDOW, vocab, &tasks, max_len, 1.0 + i as f64, &mut rng)).collect::<Result<_>>()?;
    let (mut bound_gap, mut decomposition_err, mut tight_err) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for i in 0..random_q {
        let policy = &policies[i % policies.len()];
        let task = &tasks[i % tasks.len()];
        let log_p = exact_marginal(policy, task, &space)?.ln();
        let mask = correct_mask(task, &space)?;
        let on_correct = i % 2 == 0;
        let w: Vec<f64> = mask.iter().map(|&c| if (on_correct && !c) || rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>().powi(4) }).collect();
        let Ok(q) = QDistribution::from_weights(task.id, w) else { continue };
        let e = elbo(&q, policy, task, &space)?;
        bound_gap = bound_gap.max(e - log_p);
        if on_correct {
            let k = kl_q_posterior(&q, policy, task, &space)?;
            decomposition_err = decomposition_err.max((e + k - log_p).abs());
        }
    }
    for policy in &policies {
        for task in &tasks {
            let post = exact_posterior(policy, task, &space)?;
            let log_p = exact_marginal(policy, task, &space)?.ln();
            tight_err = tight_err.max((elbo(&post, policy, task, &space)? - log_p).abs());
        }
    }
    checks.push(Check { name: "elbo bound", passed: bound_gap <= TOL, detail: format!("max elbo - log P = {bound_gap:.3e} over {random_q} q") });
    checks.push(Check { name: "elbo tightness", passed: tight_err <= TOL, detail: format!("max |elbo(q*) - log P| = {tight_err:.3e}") });
    checks.push(Check { name: "elbo + kl = log P", passed: decomposition_err <= TOL, detail: format!("max error {decomposition_err:.3e}") });

    let policy = &policies[0];
    let task = &tasks[0];
    let cfg = NetConfig { backend: Backend::Tabular, window: WINDOW, ..Default::default() };
    let mut exact = CriticParams::<f64>::new(Net::zeros(&cfg, vocab, 1));
    let mask = correct_mask(task, &space)?;
    if let Net::Tabular(tab) = &mut exact.net {
        for (y, c) in space.sequences().iter().zip(&mask) {
            tab.row_mut(&context(&task.prompt, y, WINDOW))[0] = if *c { 40.0 } else { -40.0 };
        }
    }
    let q = critic_q(&exact, policy, task, &space)?;
    let post = exact_posterior(policy, task, &space)?;
    let tv = q.mass.iter().zip(&post.mass).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
    checks.push(Check { name: "exact critic recovers posterior", passed: tv <= TOL, detail: format!("total variation {tv:.3e}") });

    let gold = task.gold_answer(Access::Evaluation)?;
    let exact_p = exact_marginal(policy, task, &space)?;
    let n = 100_000;
    let hits = (0..n)
        .filter(|_| {
            task.extract_answer(&policy.sample_response(&task.prompt, max_len, crate::nnet::Temperature::Sample(1.0), &mut rng)) == Some(gold)
        })
        .count();
    let est = hits as f64 / n as f64;
    let se = (exact_p * (1.0 - exact_p) / n as f64).sqrt();
    checks.push(Check {
        name: "monte carlo marginal",
        passed: (est - exact_p).abs() <= 3.0 * se,
        detail: format!("exact {exact_p:.6}, estimate {est:.6}, 3 se {:.2e}", 3.0 * se),
    });

    let (_, trace) = oracle_em_run(policy, &tasks, &space, &OracleEmConfig { iterations: 50, inner_steps: 1, lr: 0.5 })?;
    let worst = trace.objective.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check {
        name: "exact EM monotone",
        passed: worst <= TOL,
        detail: format!("J {:.6} -> {:.6}, largest decrease {worst:.3e}", trace.objective[0], trace.objective[trace.objective.len() - 1]),
    });
    Ok(checks)
}

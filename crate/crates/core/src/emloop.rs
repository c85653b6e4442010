//! Test-time EM: alternating critic recalibration on labeled data (E-step)
//! and critic-rewarded policy refinement on unlabeled data (M-step), plus the
//! self-rewarding baselines and ablations behind one method registry.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{Checkpoint, CriticParams, PolicyParams};
use crate::rlcore::{
    build_trajectories, critic_loss_and_grad, policy_loss_and_grad, rlvr_step, rollout_groups, sample_prompts, BaselineMode, ClipConfig,
    CriticSample, OptimizerConfig, OptimizerState, RewardSource, RolloutConfig, Stage1Config,
};
use crate::rng::{stream_id, stream_rng};
use crate::scalar::Scalar;
use crate::taskgen::{DatasetSplit, Task, TokenId};

const PHASE_E_PROMPTS: u8 = 3;
const PHASE_E_ROLLOUTS: u8 = 4;
const PHASE_M_PROMPTS: u8 = 5;
const PHASE_M_ROLLOUTS: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tempo,
    Ttrl,
    Empo,
    FrozenCritic,
    SupervisedPpo,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Tempo, Method::Ttrl, Method::Empo, Method::FrozenCritic, Method::SupervisedPpo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tempo => "tempo",
            Method::Ttrl => "ttrl",
            Method::Empo => "empo",
            Method::FrozenCritic => "frozen_critic",
            Method::SupervisedPpo => "supervised_ppo",
        }
    }

    /// Methods that reward by agreement within a group of samples.
    pub fn is_voting(self) -> bool {
        matches!(self, Method::Ttrl | Method::Empo)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected one of tempo, ttrl, empo, frozen_critic, supervised_ppo)")))
    }
}

/// Where E-step rollouts come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EStepSource {
    /// Fresh responses from the current policy at every E-step.
    #[default]
    Fresh,
    /// One buffer drawn at the first E-step and reused afterwards.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTTConfig {
    pub method: Method,
    /// Total iterations `N` (M-steps).
    pub iterations: usize,
    /// M-steps per E-step.
    #[serde(default = "one")]
    pub e_step_period: usize,
    pub prompts_per_step: usize,
    pub group_size: usize,
    /// Labeled prompts per E-step and responses per prompt.
    pub e_step_prompts: usize,
    pub e_step_group: usize,
    #[serde(default)]
    pub e_step_source: EStepSource,
    pub rollout: RolloutConfig,
    pub actor: OptimizerConfig,
    pub critic: OptimizerConfig,
    #[serde(default)]
    pub clip: ClipConfig,
    #[serde(default = "one")]
    pub ppo_epochs: usize,
    #[serde(default)]
    pub baseline: BaselineMode,
    pub eval_every: usize,
    /// Overwritten from the run seed when part of a run configuration.
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for TTTConfig {
    fn default() -> Self {
        Self {
            method: Method::Tempo,
            iterations: 300,
            e_step_period: 1,
            prompts_per_step: 32,
            group_size: 8,
            e_step_prompts: 32,
            e_step_group: 8,
            e_step_source: EStepSource::Fresh,
            rollout: RolloutConfig::default(),
            actor: OptimizerConfig::adam(0.02),
            critic: OptimizerConfig::adam(0.05),
            clip: ClipConfig::default(),
            ppo_epochs: 1,
            baseline: BaselineMode::Preceding,
            eval_every: 10,
            seed: 0,
        }
    }
}

impl TTTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e_step_period == 0 || self.eval_every == 0 || self.ppo_epochs == 0 {
            return Err(Error::Config("e_step_period, eval_every and ppo_epochs must be >= 1".into()));
        }
        if self.prompts_per_step == 0 || self.group_size == 0 || self.e_step_prompts == 0 || self.e_step_group == 0 {
            return Err(Error::Config("batch shapes must be >= 1".into()));
        }
        if self.method.is_voting() && self.group_size < 2 {
            return Err(Error::Config(format!("{} needs group_size >= 2 to vote", self.method)));
        }
        if self.rollout.max_len == 0 {
            return Err(Error::Config("max response length must be >= 1".into()));
        }
        self.actor.validate()?;
        self.critic.validate()
    }

    /// The RLVR settings used by the supervised-continuation ablation.
    pub fn supervised(&self) -> Stage1Config {
        Stage1Config {
            steps: self.iterations,
            prompts_per_step: self.prompts_per_step,
            group_size: self.group_size,
            rollout: self.rollout,
            actor: self.actor,
            critic: self.critic,
            clip: self.clip,
            ppo_epochs: self.ppo_epochs,
            baseline: self.baseline,
            seed: self.seed,
        }
    }
}

/// How often each phase ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub e_steps: usize,
    pub m_steps: usize,
    pub supervised_steps: usize,
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterDiag {
    pub iter: usize,
    pub critic_loss: Option<f64>,
    pub actor_loss: f64,
    pub mean_reward: f64,
    pub clipped_tokens: usize,
}

/// Everything a Stage-2 run owns; enough to resume bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TttState<F> {
    pub policy: PolicyParams<F>,
    pub critic: CriticParams<F>,
    pub actor_opt: OptimizerState<F>,
    pub critic_opt: OptimizerState<F>,
    /// Completed iterations.
    pub iter: usize,
    pub counts: CallCounts,
    pub replay: Option<Vec<CriticSample>>,
}

impl<F: Scalar> TttState<F> {
    /// Fresh optimizer state around Stage-1 parameters.
    pub fn new(policy: PolicyParams<F>, critic: CriticParams<F>, cfg: &TTTConfig) -> Self {
        Self {
            policy,
            critic,
            actor_opt: OptimizerState::new(cfg.actor),
            critic_opt: OptimizerState::new(cfg.critic),
            iter: 0,
            counts: CallCounts::default(),
            replay: None,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<F>> {
        let mut entries = vec![("policy".to_string(), self.policy.net.clone()), ("critic".to_string(), self.critic.net.clone())];
        for (name, opt) in [("actor", &self.actor_opt), ("critic", &self.critic_opt)] {
            if let (Some(m), Some(v)) = (&opt.m, &opt.v) {
                entries.push((format!("{name}.m"), m.clone()));
                entries.push((format!("{name}.v"), v.clone()));
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("iter".into(), self.iter.to_string());
        meta.insert("actor_step".into(), self.actor_opt.step.to_string());
        meta.insert("critic_step".into(), self.critic_opt.step.to_string());
        meta.insert("counts".into(), serde_json::to_string(&self.counts)?);
        if let Some(r) = &self.replay {
            meta.insert("replay".into(), serde_json::to_string(r)?);
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn from_checkpoint(mut ck: Checkpoint<F>, cfg: &TTTConfig) -> Result<Self> {
        let meta = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{k}`")));
        let parse = |k: &str, v: String| v.parse::<u64>().map_err(|e| Error::Format(format!("meta `{k}`: {e}")));
        let iter = parse("iter", meta("iter")?)? as usize;
        let actor_step = parse("actor_step", meta("actor_step")?)?;
        let critic_step = parse("critic_step", meta("critic_step")?)?;
        let counts: CallCounts = serde_json::from_str(&meta("counts")?)?;
        let replay = match ck.meta.get("replay") {
            Some(s) => Some(serde_json::from_str(s)?),
            None => None,
        };
        let mut opt = |name: &str, config: OptimizerConfig, step: u64| -> Result<OptimizerState<F>> {
            let has = ck.entries.iter().any(|(n, _)| n == &format!("{name}.m"));
            let (m, v) = if has { (Some(ck.take(&format!("{name}.m"))?), Some(ck.take(&format!("{name}.v"))?)) } else { (None, None) };
            Ok(OptimizerState { config, m, v, step })
        };
        let actor_opt = opt("actor", cfg.actor, actor_step)?;
        let critic_opt = opt("critic", cfg.critic, critic_step)?;
        let policy = PolicyParams::new(ck.take("policy")?);
        let critic = CriticParams::new(ck.take("critic")?);
        Ok(Self { policy, critic, actor_opt, critic_opt, iter, counts, replay })
    }
}

/// Receives the state at every evaluation point: before the first iteration,
/// every `eval_every` iterations, and after the last one.
pub trait Observer<F> {
    fn on_eval(&mut self, state: &TttState<F>, last: Option<&IterDiag>) -> Result<()>;
}

impl<F, T: FnMut(&TttState<F>, Option<&IterDiag>) -> Result<()>> Observer<F> for T {
    fn on_eval(&mut self, state: &TttState<F>, last: Option<&IterDiag>) -> Result<()> {
        self(state, last)
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl<F> Observer<F> for NoObserver {
    fn on_eval(&mut self, _: &TttState<F>, _: Option<&IterDiag>) -> Result<()> {
        Ok(())
    }
}

pub struct MethodOutcome<F> {
    pub state: TttState<F>,
    pub diags: Vec<IterDiag>,
    /// Iteration counts at which the observer ran.
    pub eval_points: Vec<usize>,
}

fn labeled_samples<F: Scalar>(policy: &PolicyParams<F>, labeled: &[Task], cfg: &TTTConfig, iter: usize) -> Result<Vec<CriticSample>> {
    let mut rng = stream_rng(cfg.seed, stream_id(PHASE_E_PROMPTS, iter as u64, 0));
    let picks = sample_prompts(labeled.len(), cfg.e_step_prompts, &mut rng);
    let prompts: Vec<&Task> = picks.iter().map(|&i| &labeled[i]).collect();
    let responses = rollout_groups(policy, &prompts, cfg.e_step_group, &cfg.rollout, cfg.seed, stream_id(PHASE_E_ROLLOUTS, iter as u64, 0));
    let expanded: Vec<&Task> = prompts.iter().flat_map(|t| std::iter::repeat_n(*t, cfg.e_step_group)).collect();
    let batch = build_trajectories(policy, None, &expanded, &responses, RewardSource::Verifier, cfg.baseline)?;
    Ok(batch.into_iter().map(|t| CriticSample { prompt: t.prompt, response: t.response, correct: t.correct }).collect())
}

/// Critic recalibration: verifier-labeled rollouts of the current policy on
/// labeled prompts, one regression step. The policy is not touched.
///
/// With [`EStepSource::Replay`] the first call fills `replay` and later calls
/// reuse it.
pub fn e_step<F: Scalar>(
    critic: &mut CriticParams<F>,
    critic_opt: &mut OptimizerState<F>,
    policy: &PolicyParams<F>,
    labeled: &[Task],
    cfg: &TTTConfig,
    iter: usize,
    replay: &mut Option<Vec<CriticSample>>,
) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::InvalidInput("E-step needs labeled tasks".into()));
    }
    let fresh;
    let samples: &[CriticSample] = match cfg.e_step_source {
        EStepSource::Fresh => {
            fresh = labeled_samples(policy, labeled, cfg, iter)?;
            &fresh
        }
        EStepSource::Replay => {
            if replay.is_none() {
                *replay = Some(labeled_samples(policy, labeled, cfg, iter)?);
            }
            replay.as_deref().expect("filled above")
        }
    };
    let (loss, grad) = critic_loss_and_grad(critic, samples)?;
    critic_opt.step(&mut critic.net, &grad).map_err(|e| at_iter(e, iter))?;
    Ok(loss.as_f64())
}

/// Result of one policy update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepDiag {
    pub actor_loss: f64,
    pub mean_reward: f64,
    pub clipped_tokens: usize,
}

fn unlabeled_rollouts<'a, F: Scalar>(
    policy: &PolicyParams<F>,
    unlabeled: &'a [Task],
    cfg: &TTTConfig,
    iter: usize,
) -> Result<(Vec<&'a Task>, Vec<Vec<TokenId>>)> {
    if unlabeled.is_empty() {
        return Err(Error::InvalidInput("M-step needs unlabeled tasks".into()));
    }
    let mut rng = stream_rng(cfg.seed, stream_id(PHASE_M_PROMPTS, iter as u64, 0));
    let picks = sample_prompts(unlabeled.len(), cfg.prompts_per_step, &mut rng);
    let prompts: Vec<&Task> = picks.iter().map(|&i| &unlabeled[i]).collect();
    let responses = rollout_groups(policy, &prompts, cfg.group_size, &cfg.rollout, cfg.seed, stream_id(PHASE_M_ROLLOUTS, iter as u64, 0));
    let expanded = prompts.iter().flat_map(|t| std::iter::repeat_n(*t, cfg.group_size)).collect();
    Ok((expanded, responses))
}

fn policy_update<F: Scalar>(
    policy: &mut PolicyParams<F>,
    actor_opt: &mut OptimizerState<F>,
    batch: &[crate::rlcore::Trajectory<F>],
    cfg: &TTTConfig,
    iter: usize,
) -> Result<MStepDiag> {
    let mean_reward = batch.iter().map(|t| t.reward.as_f64()).sum::<f64>() / batch.len() as f64;
    let mut diag = MStepDiag { actor_loss: 0.0, mean_reward, clipped_tokens: 0 };
    for _ in 0..cfg.ppo_epochs {
        let (loss, grad, stats) = policy_loss_and_grad(policy, batch, &cfg.clip, None)?;
        actor_opt.step(&mut policy.net, &grad).map_err(|e| at_iter(e, iter))?;
        diag.actor_loss = loss.as_f64();
        diag.clipped_tokens = stats.clipped_tokens;
    }
    Ok(diag)
}

/// Policy refinement on unlabeled prompts with the critic's terminal value as
/// reward. Never calls the verifier.
pub fn m_step<F: Scalar>(
    policy: &mut PolicyParams<F>,
    actor_opt: &mut OptimizerState<F>,
    critic: &CriticParams<F>,
    unlabeled: &[Task],
    cfg: &TTTConfig,
    iter: usize,
) -> Result<MStepDiag> {
    let (tasks, responses) = unlabeled_rollouts(policy, unlabeled, cfg, iter)?;
    let mut batch = build_trajectories(policy, Some(critic), &tasks, &responses, RewardSource::Critic(critic), cfg.baseline)?;
    for t in &mut batch {
        t.compute_advantages()?;
    }
    policy_update(policy, actor_opt, &batch, cfg, iter)
}

/// Majority-vote rewards: 1 for responses whose answer is the most frequent
/// well-formed answer, ties going to the smallest answer. Malformed responses
/// (`None`) never win.
pub fn ttrl_reward(answers: &[Option<u64>]) -> Vec<f64> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for a in answers.iter().flatten() {
        *counts.entry(*a).or_default() += 1;
    }
    // BTreeMap iterates in ascending answer order, so the first maximum is the smallest.
    let mut majority: Option<(u64, usize)> = None;
    for (&a, &c) in &counts {
        if majority.is_none_or(|(_, best)| c > best) {
            majority = Some((a, c));
        }
    }
    let winner = majority.map(|(a, _)| a);
    answers.iter().map(|a| if a.is_some() && *a == winner { 1.0 } else { 0.0 }).collect()
}

/// Answer-cluster frequency within the group; malformed responses get 0.
pub fn empo_reward(answers: &[Option<u64>]) -> Vec<f64> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for a in answers.iter().flatten() {
        *counts.entry(*a).or_default() += 1;
    }
    let g = answers.len() as f64;
    answers.iter().map(|a| a.map_or(0.0, |x| counts[&x] as f64 / g)).collect()
}

/// Self-rewarded policy update with group-mean-centred advantages.
pub fn voting_m_step<F: Scalar>(
    method: Method,
    policy: &mut PolicyParams<F>,
    actor_opt: &mut OptimizerState<F>,
    unlabeled: &[Task],
    cfg: &TTTConfig,
    iter: usize,
) -> Result<MStepDiag> {
    let reward_fn = match method {
        Method::Ttrl => ttrl_reward,
        Method::Empo => empo_reward,
        other => return Err(Error::Config(format!("{other} is not a voting method"))),
    };
    let (tasks, responses) = unlabeled_rollouts(policy, unlabeled, cfg, iter)?;
    let g = cfg.group_size;
    let mut rewards = Vec::with_capacity(responses.len());
    let mut centred = Vec::with_capacity(responses.len());
    for (chunk, ts) in responses.chunks(g).zip(tasks.chunks(g)) {
        let answers: Vec<Option<u64>> = chunk.iter().map(|r| ts[0].extract_answer(r)).collect();
        let r = reward_fn(&answers);
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        centred.extend(r.iter().map(|x| F::of(x - mean)));
        rewards.extend(r.into_iter().map(F::of));
    }
    let mut batch = build_trajectories(policy, None, &tasks, &responses, RewardSource::Given(&rewards), cfg.baseline)?;
    for (t, a) in batch.iter_mut().zip(centred) {
        t.set_uniform_advantage(a);
    }
    policy_update(policy, actor_opt, &batch, cfg, iter)
}

fn at_iter(e: Error, iter: usize) -> Error {
    match e {
        Error::Numerical { msg, .. } => Error::Numerical { step: iter, msg },
        other => other,
    }
}

/// One iteration of `cfg.method` on `state`.
fn iterate<F: Scalar>(state: &mut TttState<F>, data: &DatasetSplit, cfg: &TTTConfig) -> Result<IterDiag> {
    let k = state.iter;
    let mut critic_loss = None;
    let m = match cfg.method {
        Method::Tempo | Method::FrozenCritic => {
            if cfg.method == Method::Tempo && k.is_multiple_of(cfg.e_step_period) {
                critic_loss = Some(e_step(&mut state.critic, &mut state.critic_opt, &state.policy, &data.labeled, cfg, k, &mut state.replay)?);
                state.counts.e_steps += 1;
            }
            let d = m_step(&mut state.policy, &mut state.actor_opt, &state.critic, &data.unlabeled, cfg, k)?;
            state.counts.m_steps += 1;
            d
        }
        Method::Ttrl | Method::Empo => {
            let d = voting_m_step(cfg.method, &mut state.policy, &mut state.actor_opt, &data.unlabeled, cfg, k)?;
            state.counts.m_steps += 1;
            d
        }
        Method::SupervisedPpo => {
            let log =
                rlvr_step(&mut state.policy, &mut state.critic, &mut state.actor_opt, &mut state.critic_opt, &data.labeled, &cfg.supervised(), k)?;
            state.counts.supervised_steps += 1;
            critic_loss = Some(log.critic_loss);
            MStepDiag { actor_loss: log.actor_loss, mean_reward: log.mean_reward, clipped_tokens: 0 }
        }
    };
    state.iter += 1;
    Ok(IterDiag { iter: state.iter, critic_loss, actor_loss: m.actor_loss, mean_reward: m.mean_reward, clipped_tokens: m.clipped_tokens })
}

/// Runs `cfg.method` from `state` until `cfg.iterations` iterations are done.
/// A state restored from a checkpoint continues exactly where it stopped.
pub fn run_method<F: Scalar>(state: TttState<F>, data: &DatasetSplit, cfg: &TTTConfig, observer: &mut dyn Observer<F>) -> Result<MethodOutcome<F>> {
    cfg.validate()?;
    let mut state = state;
    let mut diags = Vec::new();
    let mut eval_points = Vec::new();
    if state.iter == 0 {
        observer.on_eval(&state, None)?;
        eval_points.push(0);
    }
    while state.iter < cfg.iterations {
        let d = iterate(&mut state, data, cfg)?;
        if state.iter.is_multiple_of(cfg.eval_every) || state.iter == cfg.iterations {
            observer.on_eval(&state, Some(&d))?;
            eval_points.push(state.iter);
        }
        diags.push(d);
    }
    Ok(MethodOutcome { state, diags, eval_points })
}

fn expect_method(cfg: &TTTConfig, allowed: &[Method], entry: &str) -> Result<()> {
    if allowed.contains(&cfg.method) {
        Ok(())
    } else {
        Err(Error::Config(format!("method {} cannot run through {entry}", cfg.method)))
    }
}

/// Full TEMPO: E-step every `e_step_period` iterations, M-step every iteration.
pub fn tempo_run<F: Scalar>(state: TttState<F>, data: &DatasetSplit, cfg: &TTTConfig, observer: &mut dyn Observer<F>) -> Result<MethodOutcome<F>> {
    expect_method(cfg, &[Method::Tempo], "tempo_run")?;
    run_method(state, data, cfg, observer)
}

/// TTRL or EMPO: voting rewards, no critic, no E-step.
pub fn baseline_run<F: Scalar>(state: TttState<F>, data: &DatasetSplit, cfg: &TTTConfig, observer: &mut dyn Observer<F>) -> Result<MethodOutcome<F>> {
    expect_method(cfg, &[Method::Ttrl, Method::Empo], "baseline_run")?;
    run_method(state, data, cfg, observer)
}

/// Frozen critic (TEMPO without E-steps) or supervised continuation on the
/// labeled split only.
pub fn ablation_run<F: Scalar>(state: TttState<F>, data: &DatasetSplit, cfg: &TTTConfig, observer: &mut dyn Observer<F>) -> Result<MethodOutcome<F>> {
    expect_method(cfg, &[Method::FrozenCritic, Method::SupervisedPpo], "ablation_run")?;
    run_method(state, data, cfg, observer)
}

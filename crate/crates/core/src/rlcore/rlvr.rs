use serde::{Deserialize, Serialize};

use super::{
    build_trajectories, critic_loss_and_grad, policy_loss_and_grad, rollout_groups, sample_prompts, BaselineMode, ClipConfig, CriticSample,
    OptimizerConfig, OptimizerState, RewardSource, RolloutConfig,
};
use crate::error::{Error, Result};
use crate::nnet::{CriticParams, PolicyParams};
use crate::rng::{stream_id, stream_rng};
use crate::scalar::Scalar;
use crate::taskgen::Task;

/// Actor-critic RLVR on labeled tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub steps: usize,
    pub prompts_per_step: usize,
    pub group_size: usize,
    pub rollout: RolloutConfig,
    pub actor: OptimizerConfig,
    pub critic: OptimizerConfig,
    #[serde(default)]
    pub clip: ClipConfig,
    /// Policy updates per rollout batch; epochs after the first are off-policy.
    #[serde(default = "one")]
    pub ppo_epochs: usize,
    #[serde(default)]
    pub baseline: BaselineMode,
    /// Overwritten from the run seed when part of a run configuration.
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 300,
            prompts_per_step: 32,
            group_size: 8,
            rollout: RolloutConfig::default(),
            actor: OptimizerConfig::adam(0.05),
            critic: OptimizerConfig::adam(0.05),
            clip: ClipConfig::default(),
            ppo_epochs: 1,
            baseline: BaselineMode::Preceding,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.prompts_per_step == 0 || self.group_size == 0 || self.ppo_epochs == 0 {
            return Err(Error::Config("prompts_per_step, group_size and ppo_epochs must be >= 1".into()));
        }
        if self.rollout.max_len == 0 {
            return Err(Error::Config("max response length must be >= 1".into()));
        }
        self.actor.validate()?;
        self.critic.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

/// One RLVR iteration: rollouts on sampled labeled prompts, verifier rewards,
/// critic regression, then clipped policy-gradient epochs.
#[allow(clippy::too_many_arguments)]
pub fn rlvr_step<F: Scalar>(
    policy: &mut PolicyParams<F>,
    critic: &mut CriticParams<F>,
    actor_opt: &mut OptimizerState<F>,
    critic_opt: &mut OptimizerState<F>,
    tasks: &[Task],
    cfg: &Stage1Config,
    step: usize,
) -> Result<StepLog> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("no labeled tasks".into()));
    }
    let mut rng = stream_rng(cfg.seed, stream_id(1, step as u64, 0));
    let picks = sample_prompts(tasks.len(), cfg.prompts_per_step, &mut rng);
    let prompts: Vec<&Task> = picks.iter().map(|&i| &tasks[i]).collect();
    let responses = rollout_groups(policy, &prompts, cfg.group_size, &cfg.rollout, cfg.seed, stream_id(2, step as u64, 0));
    let expanded: Vec<&Task> = prompts.iter().flat_map(|t| std::iter::repeat_n(*t, cfg.group_size)).collect();
    let mut batch = build_trajectories(policy, Some(critic), &expanded, &responses, RewardSource::Verifier, cfg.baseline)?;
    for tr in &mut batch {
        tr.compute_advantages()?;
    }
    let mean_reward = batch.iter().map(|t| t.reward.as_f64()).sum::<f64>() / batch.len() as f64;

    let samples: Vec<CriticSample> =
        batch.iter().map(|t| CriticSample { prompt: t.prompt.clone(), response: t.response.clone(), correct: t.correct }).collect();
    let (critic_loss, cg) = critic_loss_and_grad(critic, &samples)?;
    critic_opt.step(&mut critic.net, &cg).map_err(|e| at_step(e, step))?;

    let mut actor_loss = F::zero();
    for _ in 0..cfg.ppo_epochs {
        let (loss, pg, _) = policy_loss_and_grad(policy, &batch, &cfg.clip, None)?;
        actor_opt.step(&mut policy.net, &pg).map_err(|e| at_step(e, step))?;
        actor_loss = loss;
    }
    Ok(StepLog { step, mean_reward, actor_loss: actor_loss.as_f64(), critic_loss: critic_loss.as_f64() })
}

pub(crate) fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numerical { msg, .. } => Error::Numerical { step, msg },
        other => other,
    }
}

/// Stage 1: trains `(θ0, φ0)` by RLVR on the labeled tasks for `cfg.steps`
/// iterations.
pub fn rlvr_init<F: Scalar>(
    policy: PolicyParams<F>,
    critic: CriticParams<F>,
    labeled: &[Task],
    cfg: &Stage1Config,
) -> Result<(PolicyParams<F>, CriticParams<F>, Vec<StepLog>)> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidInput("labeled split is empty".into()));
    }
    let (mut policy, mut critic) = (policy, critic);
    let mut actor_opt = OptimizerState::new(cfg.actor);
    let mut critic_opt = OptimizerState::new(cfg.critic);
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        logs.push(rlvr_step(&mut policy, &mut critic, &mut actor_opt, &mut critic_opt, labeled, cfg, step)?);
    }
    Ok((policy, critic, logs))
}

//! Rewards, advantages, actor/critic losses, the optimizer, and Stage-1 RLVR.

mod loss;
mod optim;
mod rlvr;
mod rollout;

use serde::{Deserialize, Serialize};

pub use loss::{critic_loss_and_grad, policy_loss_and_grad, ClipConfig, CriticSample, PolicyLossStats, SequenceClip};
pub use optim::{OptimizerConfig, OptimizerState, Scheme};
pub use rlvr::{rlvr_init, rlvr_step, Stage1Config, StepLog};
pub use rollout::{rollout_groups, sample_prompts, RolloutConfig};

use crate::error::{Error, Result};
use crate::nnet::{CriticParams, PolicyParams};
use crate::scalar::Scalar;
use crate::taskgen::{verify, Access, Task, TokenId};

/// Which critic value serves as the baseline of response token `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    /// `V(x, y_<t)`: the state in which `y_t` was chosen.
    #[default]
    Preceding,
    /// `V(x, y_1:t)`: the state after `y_t` was appended.
    Inclusive,
}

/// One sampled response with everything the losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<F> {
    pub task_id: u64,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub behavior_logprobs: Vec<F>,
    /// Per-token critic baselines, one per response token.
    pub values: Vec<F>,
    pub reward: F,
    /// Verifier correctness; present only when the verifier produced the reward.
    pub correct: Option<bool>,
    pub advantages: Option<Vec<F>>,
}

impl<F: Scalar> Trajectory<F> {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Fills `advantages` with `reward − values`.
    pub fn compute_advantages(&mut self) -> Result<()> {
        self.advantages = Some(advantages(&self.values, self.reward)?);
        Ok(())
    }

    /// Same advantage for every token (group-relative baselines).
    pub fn set_uniform_advantage(&mut self, a: F) {
        self.advantages = Some(vec![a; self.response.len()]);
    }

    pub fn check(&self) -> Result<()> {
        let t = self.response.len();
        if t == 0 || self.behavior_logprobs.len() != t || self.values.len() != t {
            return Err(Error::Shape(format!(
                "trajectory of {t} tokens with {} log-probs and {} values",
                self.behavior_logprobs.len(),
                self.values.len()
            )));
        }
        if let Some(a) = &self.advantages {
            if a.len() != t {
                return Err(Error::Shape(format!("{} advantages for {t} tokens", a.len())));
            }
        }
        Ok(())
    }
}

/// `A_t = R − V_t`.
pub fn advantages<F: Scalar>(values: &[F], reward: F) -> Result<Vec<F>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("advantages of an empty value vector".into()));
    }
    Ok(values.iter().map(|&v| reward - v).collect())
}

/// Verifier reward in `{0, 1}`. Refuses sealed tasks.
pub fn reward_verifiable<F: Scalar>(task: &Task, response: &[TokenId]) -> Result<F> {
    Ok(if verify(task, response, Access::Training)? { F::one() } else { F::zero() })
}

/// Critic reward: the terminal value `V(x, y_1:T)`.
pub fn reward_critic<F: Scalar>(critic: &CriticParams<F>, prompt: &[TokenId], response: &[TokenId]) -> Result<F> {
    Ok(*critic.values(prompt, response)?.last().expect("non-empty response"))
}

/// Per-token baselines for `response` under `mode`.
pub fn baselines<F: Scalar>(critic: &CriticParams<F>, prompt: &[TokenId], response: &[TokenId], mode: BaselineMode) -> Result<Vec<F>> {
    let states = critic.state_values(prompt, response)?;
    let t = response.len();
    Ok(match mode {
        BaselineMode::Preceding => states[..t].to_vec(),
        BaselineMode::Inclusive => states[1..].to_vec(),
    })
}

/// Where a trajectory's terminal reward comes from.
pub enum RewardSource<'a, F> {
    Verifier,
    Critic(&'a CriticParams<F>),
    /// Externally computed rewards, one per response (group-relative baselines).
    Given(&'a [F]),
}

/// Builds trajectories for `responses[i]` sampled on `tasks[i]`: behaviour
/// log-probs under `policy`, critic baselines, and the terminal reward.
/// Advantages are left empty.
pub fn build_trajectories<F: Scalar>(
    policy: &PolicyParams<F>,
    critic: Option<&CriticParams<F>>,
    tasks: &[&Task],
    responses: &[Vec<TokenId>],
    source: RewardSource<'_, F>,
    mode: BaselineMode,
) -> Result<Vec<Trajectory<F>>> {
    use rayon::prelude::*;
    if tasks.len() != responses.len() {
        return Err(Error::Shape(format!("{} tasks for {} responses", tasks.len(), responses.len())));
    }
    tasks
        .par_iter()
        .zip(responses.par_iter())
        .enumerate()
        .map(|(i, (task, response))| {
            let (_, lp) = policy.sequence_logprob(&task.prompt, response)?;
            let values = match critic {
                Some(c) => baselines(c, &task.prompt, response, mode)?,
                None => vec![F::zero(); response.len()],
            };
            let (reward, correct) = match &source {
                RewardSource::Verifier => {
                    let ok = verify(task, response, Access::Training)?;
                    (if ok { F::one() } else { F::zero() }, Some(ok))
                }
                RewardSource::Critic(c) => (reward_critic(c, &task.prompt, response)?, None),
                RewardSource::Given(r) => (r[i], None),
            };
            Ok(Trajectory {
                task_id: task.id,
                prompt: task.prompt.clone(),
                response: response.clone(),
                behavior_logprobs: lp,
                values,
                reward,
                correct,
                advantages: None,
            })
        })
        .collect()
}

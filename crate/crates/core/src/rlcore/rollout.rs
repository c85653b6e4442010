use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nnet::{PolicyParams, Temperature};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::taskgen::{Task, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_len: usize,
    pub temperature: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { max_len: 4, temperature: 1.0 }
    }
}

impl RolloutConfig {
    pub fn temperature(&self) -> Temperature {
        if self.temperature <= 0.0 {
            Temperature::Greedy
        } else {
            Temperature::Sample(self.temperature)
        }
    }
}

/// `count` task indices drawn uniformly with replacement.
pub fn sample_prompts<R: Rng>(n_tasks: usize, count: usize, rng: &mut R) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..n_tasks)).collect()
}

/// `group` responses for each task, flattened task-major. Response `j` uses
/// random stream `stream_base + j` of `seed`, so the result is independent of
/// thread scheduling.
pub fn rollout_groups<F: Scalar>(
    policy: &PolicyParams<F>,
    tasks: &[&Task],
    group: usize,
    cfg: &RolloutConfig,
    seed: u64,
    stream_base: u64,
) -> Vec<Vec<TokenId>> {
    (0..tasks.len() * group)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, stream_base + j as u64);
            policy.sample_response(&tasks[j / group].prompt, cfg.max_len, cfg.temperature(), &mut rng)
        })
        .collect()
}

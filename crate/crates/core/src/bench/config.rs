use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::emloop::TTTConfig;
use crate::error::{Error, Result};
use crate::nnet::{Backend, NetConfig};
use crate::rlcore::{ClipConfig, OptimizerConfig, RolloutConfig, Stage1Config};
use crate::taskgen::{GeneratorConfig, Op, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Samples per task.
    pub n: usize,
    pub ks: Vec<usize>,
    #[serde(default = "unit_temperature")]
    pub temperature: f64,
}

fn unit_temperature() -> f64 {
    1.0
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n: 16, ks: vec![1, 8, 16], temperature: 1.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let max_k = self.ks.iter().copied().max().ok_or_else(|| Error::Config("eval ks must be non-empty".into()))?;
        if self.ks.contains(&0) {
            return Err(Error::Config("eval ks must be >= 1".into()));
        }
        if self.n < max_k {
            return Err(Error::Config(format!("eval n = {} is below max k = {max_k}", self.n)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub policy: NetConfig,
    pub critic: NetConfig,
    /// Half-width of the uniform initialization of mlp weights.
    pub init_scale: f64,
}

/// A complete experiment: data, models, Stage 1, Stage 2 and evaluation.
///
/// `seed` drives model initialization, Stage 1 and Stage 2; the seeds inside
/// `stage1` and `ttt` are overwritten from it. Dataset seeds stay with the
/// generator configs so that every run seed sees the same tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub labeled: GeneratorConfig,
    pub unlabeled: GeneratorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<GeneratorConfig>,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub ttt: TTTConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Log the exact objective at every evaluation point when the response
    /// space is small enough to enumerate.
    #[serde(default)]
    pub oracle: bool,
}

impl Default for RunConfig {
    /// The desk-scale shifted benchmark: depth-2 labeled, depth-3 unlabeled.
    fn default() -> Self {
        let labeled = GeneratorConfig { modulus: 7, operand_range: [0, 6], depth: 2, operators: vec![Op::Add, Op::Mul], count: 256, seed: 11 };
        let unlabeled = GeneratorConfig { depth: 3, count: 128, seed: 12, ..labeled.clone() };
        let holdout = GeneratorConfig { depth: 3, count: 128, seed: 13, ..labeled.clone() };
        let net = NetConfig { backend: Backend::Mlp, window: 4, dim: 8, hidden: 64 };
        // The critic needs two more tokens than the policy to see the same prompt
        // suffix from a terminal state `... SEP d EOS`.
        let critic_net = NetConfig { window: 6, ..net };
        let rollout = RolloutConfig { max_len: 3, temperature: 1.0 };
        // A sigmoid critic trained with Adam saturates at 0 during the first
        // all-wrong steps and never recovers; plain SGD does not overshoot.
        let critic = OptimizerConfig::sgd(1.0);
        // Without an entropy bonus Stage 1 collapses onto the most frequent
        // answer, leaving nothing for test-time training to reweight.
        let stage1_clip = ClipConfig { entropy_coef: 0.05, ..ClipConfig::default() };
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/toy"),
            labeled,
            unlabeled,
            holdout: Some(holdout),
            model: ModelConfig { policy: net, critic: critic_net, init_scale: 0.5 },
            stage1: Stage1Config { steps: 400, rollout, actor: OptimizerConfig::adam(0.01), critic, clip: stage1_clip, ..Default::default() },
            ttt: TTTConfig { rollout, iterations: 300, actor: OptimizerConfig::adam(0.002), critic, ..Default::default() },
            eval: EvalConfig::default(),
            oracle: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.apply_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Sets the run seed and the training seeds derived from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.stage1.seed = seed;
        self.ttt.seed = seed;
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let mut all = vec![&self.labeled, &self.unlabeled];
        all.extend(self.holdout.as_ref());
        Vocab::for_configs(&all)
    }

    pub fn validate(&self) -> Result<()> {
        self.labeled.validate()?;
        self.unlabeled.validate()?;
        if let Some(h) = &self.holdout {
            h.validate()?;
        }
        let v = self.vocab()?.size();
        self.model.policy.validate(v)?;
        self.model.critic.validate(v)?;
        if !(self.model.init_scale >= 0.0 && self.model.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        self.stage1.validate()?;
        self.ttt.validate()?;
        self.eval.validate()
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::compare::RunSummary;
use super::{evaluate, read_metric_log, EvalRecord, LogHeader, MetricLog, RunConfig};
use crate::emloop::{run_method, IterDiag, TttState};
use crate::error::{Error, Result};
use crate::nnet::{read_checkpoint, write_checkpoint, Checkpoint, CriticParams, PolicyParams};
use crate::oracle::{exact_objective, ResponseSpace};
use crate::rlcore::rlvr_init;
use crate::rng::{stream_id, stream_rng};
use crate::taskgen::{dump_tasks, split_shifted_with, DatasetSplit, Task};

const STAGE1_CKPT: &str = "stage1.ckpt";

/// Tasks of one run.
pub struct RunData {
    pub split: DatasetSplit,
    pub holdout: Vec<Task>,
}

impl RunData {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let extra: Vec<_> = cfg.holdout.iter().collect();
        let split = split_shifted_with(&cfg.labeled, &cfg.unlabeled, &extra)?;
        let holdout = match &cfg.holdout {
            Some(h) => split.sealed_pool(h)?,
            None => Vec::new(),
        };
        Ok(Self { split, holdout })
    }

    /// Final-evaluation tasks: the holdout pool when configured, else the unlabeled split.
    pub fn final_tasks(&self) -> &[Task] {
        if self.holdout.is_empty() {
            &self.split.unlabeled
        } else {
            &self.holdout
        }
    }
}

/// Identity of the Stage-1 inputs; a cached checkpoint is reused only when it matches.
fn stage1_key(cfg: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string(&(&cfg.seed, &cfg.labeled, &cfg.unlabeled, &cfg.holdout, &cfg.model, &cfg.stage1))?)
}

fn init_models(cfg: &RunConfig, vocab: usize) -> Result<(PolicyParams<f64>, CriticParams<f64>)> {
    let mut rng = stream_rng(cfg.seed, stream_id(0, 0, 0));
    let policy = PolicyParams::init(&cfg.model.policy, vocab, cfg.model.init_scale, &mut rng)?;
    let critic = CriticParams::init(&cfg.model.critic, vocab, cfg.model.init_scale, &mut rng)?;
    Ok((policy, critic))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

/// Stage 1 into `cfg.out_dir`: RLVR on the labeled split, or the cached
/// checkpoint when one with identical inputs exists.
pub fn run_stage1(cfg: &RunConfig, data: &RunData) -> Result<(PolicyParams<f64>, CriticParams<f64>)> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    create_dir(dir)?;
    let key = stage1_key(cfg)?;
    let path = dir.join(STAGE1_CKPT);
    if path.exists() {
        let mut ck = read_checkpoint::<f64>(&path)?;
        if ck.meta.get("key") == Some(&key) {
            return Ok((PolicyParams::new(ck.take("policy")?), CriticParams::new(ck.take("critic")?)));
        }
    }
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    dump_tasks(dir, &[("labeled", &data.split.labeled), ("unlabeled", &data.split.unlabeled), ("holdout", &data.holdout)])?;
    let (policy, critic) = init_models(cfg, data.split.vocab.size())?;
    let (policy, critic, logs) = rlvr_init(policy, critic, &data.split.labeled, &cfg.stage1)?;
    write_jsonl(&dir.join("stage1_log.jsonl"), &logs)?;
    let mut ck = Checkpoint { meta: Default::default(), entries: vec![("policy".into(), policy.net.clone()), ("critic".into(), critic.net.clone())] };
    ck.meta.insert("key".into(), key);
    write_checkpoint(&path, &ck)?;
    Ok((policy, critic))
}

fn oracle_objective(cfg: &RunConfig, policy: &PolicyParams<f64>, tasks: &[Task]) -> Result<Option<f64>> {
    if !cfg.oracle {
        return Ok(None);
    }
    match ResponseSpace::new(policy.vocab(), cfg.ttt.rollout.max_len) {
        Ok(space) => match exact_objective(policy, tasks, &space) {
            Ok(j) => Ok(Some(j)),
            Err(Error::NegInfinity { .. }) => Ok(Some(f64::NEG_INFINITY)),
            Err(e) => Err(e),
        },
        Err(Error::SpaceTooLarge { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn eval_point(cfg: &RunConfig, policy: &PolicyParams<f64>, tasks: &[Task], step: usize, diag: Option<&IterDiag>) -> Result<EvalRecord> {
    let mut r = evaluate(policy, tasks, &cfg.eval, cfg.ttt.rollout.max_len, cfg.seed, step)?;
    r.actor_loss = diag.map(|d| d.actor_loss);
    r.critic_loss = diag.and_then(|d| d.critic_loss);
    r.exact_objective = oracle_objective(cfg, policy, tasks)?;
    Ok(r)
}

/// Stage 2 for `cfg.ttt.method` into `<out_dir>/<method>`, resuming from the
/// latest state checkpoint of an identical configuration.
pub fn run_stage2(cfg: &RunConfig, data: &RunData, policy: PolicyParams<f64>, critic: CriticParams<f64>) -> Result<PathBuf> {
    cfg.validate()?;
    let method = cfg.ttt.method;
    let dir = cfg.out_dir.join(method.name());
    create_dir(&dir)?;
    let snapshot = cfg.to_toml()?;
    let state_path = dir.join("state.ckpt");
    let log_path = dir.join("metrics.jsonl");
    let header = LogHeader::new(method.name(), cfg.seed);

    let mut state = None;
    let mut kept = Vec::new();
    if state_path.exists() && fs::read_to_string(dir.join("config.toml")).ok().as_deref() == Some(snapshot.as_str()) {
        let s = TttState::from_checkpoint(read_checkpoint(&state_path)?, &cfg.ttt)?;
        if let Ok((_, records)) = read_metric_log(&log_path) {
            kept = records.into_iter().filter(|r| r.step <= s.iter).collect();
            state = Some(s);
        }
    }
    fs::write(dir.join("config.toml"), &snapshot)?;
    let state = state.unwrap_or_else(|| TttState::new(policy, critic, &cfg.ttt));
    let mut log = MetricLog::with_records(&log_path, &header, &kept)?;
    let mut timing = fs::OpenOptions::new().create(true).append(true).open(dir.join("timing.jsonl"))?;
    let started = Instant::now();
    let tasks = &data.split.unlabeled;
    let mut observer = |s: &TttState<f64>, diag: Option<&IterDiag>| -> Result<()> {
        let r = eval_point(cfg, &s.policy, tasks, s.iter, diag)?;
        log.append(&r)?;
        writeln!(timing, "{}", serde_json::json!({ "step": s.iter, "wall_clock_s": started.elapsed().as_secs_f64() }))?;
        let mut ck = s.to_checkpoint()?;
        ck.meta.insert("method".into(), method.name().into());
        write_checkpoint(&state_path, &ck)
    };
    let outcome = run_method(state, &data.split, &cfg.ttt, &mut observer)?;

    let final_state = &outcome.state;
    let ck = Checkpoint {
        meta: [("method".to_string(), method.name().to_string())].into(),
        entries: vec![("policy".into(), final_state.policy.net.clone()), ("critic".into(), final_state.critic.net.clone())],
    };
    write_checkpoint(&dir.join("final.ckpt"), &ck)?;

    let (_, records) = read_metric_log(&log_path)?;
    let stage1 = records.first().cloned().ok_or_else(|| Error::Internal("metric log has no step-0 record".into()))?;
    let last = records.last().cloned().expect("non-empty");
    let holdout = if data.holdout.is_empty() { None } else { Some(eval_point(cfg, &final_state.policy, &data.holdout, final_state.iter, None)?) };
    let summary = RunSummary {
        method,
        seed: cfg.seed,
        iterations: final_state.iter,
        stage1,
        last,
        holdout,
        counts: final_state.counts,
        training_reads: data.split.audit().training_reads(),
        pass_estimator: "unbiased 1 - C(n-c,k)/C(n,k)".into(),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(dir)
}

/// Stage 1 (or its cached checkpoint), the configured Stage-2 method, and the
/// final evaluation. Returns the method directory.
pub fn run_experiment(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let data = RunData::new(cfg)?;
    let (policy, critic) = run_stage1(cfg, &data)?;
    run_stage2(cfg, &data, policy, critic)
}

/// Evaluates the policy stored in `ckpt` on the unlabeled split (or the
/// holdout pool when `holdout` is set).
pub fn evaluate_checkpoint(cfg: &RunConfig, ckpt: &Path, holdout: bool) -> Result<EvalRecord> {
    cfg.validate()?;
    let data = RunData::new(cfg)?;
    let mut ck = read_checkpoint::<f64>(ckpt)?;
    let policy = PolicyParams::new(ck.take("policy")?);
    let tasks = if holdout { data.final_tasks() } else { &data.split.unlabeled };
    eval_point(cfg, &policy, tasks, 0, None)
}

//! `tempo`: run Stage 1, Stage 2 methods, evaluation, oracle checks,
//! comparisons and plots.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tempo_core::bench::{compare, emit_plots, evaluate_checkpoint, run_experiment, run_stage1, RunConfig, RunData};
use tempo_core::emloop::Method;
use tempo_core::oracle::check_invariants;
use tempo_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tempo", version, about = "Test-time EM policy optimization on synthetic verifiable tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; the built-in toy benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.apply_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: RLVR on the labeled split.
    Init {
        #[command(flatten)]
        common: Common,
        /// Stage-1 steps (overrides the config).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stage 2 with the chosen method (runs or reuses Stage 1 first).
    Ttt {
        #[command(flatten)]
        common: Common,
        /// tempo, ttrl, empo, frozen_critic or supervised_ppo.
        #[arg(long)]
        method: Option<String>,
        /// Stage-2 iterations (overrides the config).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluates a checkpoint's policy.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint holding a policy, such as `final.ckpt` or `stage1.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on the holdout pool instead of the unlabeled split.
        #[arg(long)]
        holdout: bool,
    },
    /// Runs the oracle invariant suite on a tiny instance.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random q distributions for the ELBO checks.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Summarizes finished runs by method, paired by seed against TEMPO.
    Compare {
        /// Run directories, each containing `summary.json` and `metrics.jsonl`.
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 16)]
        k_avg: usize,
        #[arg(long, default_value_t = 8)]
        k_pass: usize,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Writes SVG line charts of the metric logs of runs.
    Plot {
        /// Run directories, each containing `metrics.jsonl`.
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Prints the built-in configuration as TOML.
    Defaults,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { common, steps } => {
            let mut cfg = common.load()?;
            if let Some(s) = steps {
                cfg.stage1.steps = s;
            }
            let data = RunData::new(&cfg)?;
            run_stage1(&cfg, &data)?;
            println!("stage 1 checkpoint: {}", cfg.out_dir.join("stage1.ckpt").display());
        }
        Command::Ttt { common, method, steps } => {
            let mut cfg = common.load()?;
            if let Some(m) = method {
                cfg.ttt.method = m.parse::<Method>()?;
            }
            if let Some(s) = steps {
                cfg.ttt.iterations = s;
            }
            let dir = run_experiment(&cfg)?;
            let summary = tempo_core::bench::load_summary(&dir)?;
            let k = cfg.eval.ks.iter().copied().max().unwrap_or(1);
            println!(
                "{} seed {}: avg@{k} {:.4} -> {:.4}, entropy {:.4} -> {:.4} ({})",
                summary.method,
                summary.seed,
                summary.stage1.avg(k).unwrap_or(f64::NAN),
                summary.last.avg(k).unwrap_or(f64::NAN),
                summary.stage1.answer_entropy,
                summary.last.answer_entropy,
                dir.display()
            );
        }
        Command::Eval { common, checkpoint, holdout } => {
            let cfg = common.load()?;
            let r = evaluate_checkpoint(&cfg, &checkpoint, holdout)?;
            println!("{}", serde_json::to_string_pretty(&r).map_err(Error::from)?);
        }
        Command::OracleCheck { seed, samples } => {
            let checks = check_invariants(seed, samples)?;
            let mut failed = 0;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Error::Numerical { step: 0, msg: format!("{failed} oracle invariant(s) failed") });
            }
        }
        Command::Compare { runs, k_avg, k_pass, json } => {
            let report = compare(&runs, k_avg, k_pass)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            } else {
                print!("{}", report.table);
                for s in &report.skipped {
                    eprintln!("skipped {} (no summary.json)", s.display());
                }
            }
        }
        Command::Plot { runs, out } => {
            let report = emit_plots(&runs, &out)?;
            for p in &report.written {
                println!("{}", p.display());
            }
            for (d, why) in &report.skipped {
                eprintln!("skipped {}: {why}", d.display());
            }
        }
        Command::Defaults => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

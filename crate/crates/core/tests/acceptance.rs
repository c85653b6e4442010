//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1 to 4, 7 and 8 are properties of the implementation and make the
//! target fail when violated. Criteria 5 and 6 are empirical claims about the
//! toy benchmark; their lines report the measured outcome and do not change
//! the exit status.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempo_core::bench::{avg_at_k, load_summary, pass_at_k, pass_at_k_exact, read_metric_log, run_experiment, EvalRecord, RunConfig, RunSummary};
use tempo_core::emloop::{e_step, Method, TTTConfig};
use tempo_core::nnet::{Backend, CriticParams, Net, NetConfig};
use tempo_core::oracle::{
    check_invariants, critic_q, kl_posterior_q, oracle_em_run, prefix_table, random_tabular_policy, OracleEmConfig, ResponseSpace,
};
use tempo_core::rlcore::{OptimizerConfig, OptimizerState, RolloutConfig};
use tempo_core::taskgen::{gen_tasks, GeneratorConfig, Op, Vocab};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

fn line(id: u32, name: &str, out: &Outcome, took: Duration, budget: Duration, enforced: bool) -> bool {
    let in_time = took <= budget;
    let pass = out.passed && in_time;
    let note = if enforced { "" } else { " [empirical, not enforced]" };
    println!(
        "ACCEPTANCE {id} {name}: {} ({}; {:.1}s of {}s budget){note}",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64(),
        budget.as_secs()
    );
    pass || !enforced
}

fn gradients() -> Outcome {
    let lp = common::logprob_errors(101, 25);
    let cr = common::critic_errors(102, 25);
    let su = common::surrogate_errors(103, 25);
    let worst = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let (a, b, c) = (worst(&lp), worst(&cr), worst(&su));
    Outcome {
        passed: a <= common::TOL && b <= common::TOL && c <= common::TOL,
        detail: format!("worst relative error: log-prob {a:.1e}, critic MSE {b:.1e}, clipped surrogate {c:.1e} over 25 instances each"),
    }
}

fn elbo_suite() -> Outcome {
    match check_invariants(2024, 1000) {
        Ok(checks) => {
            let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect();
            Outcome {
                passed: failed.is_empty(),
                detail: if failed.is_empty() { format!("{} oracle checks, 1000 random q", checks.len()) } else { failed.join("; ") },
            }
        }
        Err(e) => Outcome { passed: false, detail: e.to_string() },
    }
}

fn tiny_tasks(seed: u64) -> (Vec<tempo_core::taskgen::Task>, usize) {
    let gen = GeneratorConfig { modulus: 3, operand_range: [0, 2], depth: 1, operators: vec![Op::Add], count: 3, seed };
    let vocab = Vocab::for_configs(&[&gen]).unwrap().size();
    (gen_tasks(&gen).unwrap(), vocab)
}

fn critic_as_posterior() -> Outcome {
    const MAX_LEN: usize = 3;
    let (tasks, vocab) = tiny_tasks(7);
    let space = ResponseSpace::new(vocab, MAX_LEN).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let policy = random_tabular_policy(8, vocab, &tasks, MAX_LEN, 1.5, &mut rng).unwrap();
    let critic_cfg = NetConfig { backend: Backend::Tabular, window: 8, ..Default::default() };
    let mut critic = CriticParams::new(Net::<f64>::zeros(&critic_cfg, vocab, 1));
    let cfg = TTTConfig {
        e_step_prompts: 3,
        e_step_group: 64,
        rollout: RolloutConfig { max_len: MAX_LEN, temperature: 1.0 },
        critic: OptimizerConfig::adam(0.02),
        ..Default::default()
    };
    let mut opt = OptimizerState::new(cfg.critic);
    let kl = |critic: &CriticParams<f64>| -> f64 {
        tasks.iter().map(|t| kl_posterior_q(&critic_q(critic, &policy, t, &space).unwrap(), &policy, t, &space).unwrap()).sum::<f64>()
            / tasks.len() as f64
    };
    let checkpoints = [0, 25, 50, 100, 200, 400, 800, 1200, 1600, 2000];
    let mut kls = vec![kl(&critic)];
    let mut done = 0;
    for &c in &checkpoints[1..] {
        while done < c {
            if let Err(e) = e_step(&mut critic, &mut opt, &policy, &tasks, &cfg, done, &mut None) {
                return Outcome { passed: false, detail: e.to_string() };
            }
            done += 1;
        }
        kls.push(kl(&critic));
    }
    let mut worst = 0.0f64;
    let mut checked = 0;
    for t in &tasks {
        for s in prefix_table(&policy, t, &space).unwrap() {
            if s.visit >= 0.01 {
                worst = worst.max((critic.value(&t.prompt, &s.prefix) - s.p_correct).abs());
                checked += 1;
            }
        }
    }
    let rises = kls.windows(2).filter(|w| w[1] > w[0]).count();
    Outcome {
        passed: worst <= 0.05 && rises <= 1,
        detail: format!(
            "max |V - P(correct|prefix)| = {worst:.4} over {checked} prefixes; KL(posterior || critic q) {:.4} -> {:.4} with {rises} rises in {} steps",
            kls[0],
            kls[kls.len() - 1],
            kls.len() - 1
        ),
    }
}

fn em_monotonicity() -> Outcome {
    let (tasks, vocab) = tiny_tasks(9);
    let space = ResponseSpace::new(vocab, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let policy = random_tabular_policy(8, vocab, &tasks, 3, 2.0, &mut rng).unwrap();
    match oracle_em_run(&policy, &tasks, &space, &OracleEmConfig::default()) {
        Ok((_, trace)) => {
            let worst = trace.objective.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
            let smallest_step = -worst;
            let j = &trace.objective;
            Outcome {
                passed: worst <= 1e-9 && j.len() == 51,
                detail: format!(
                    "J {:.4} -> {:.4} over {} iterations, smallest per-iteration change {smallest_step:+.1e}",
                    j[0],
                    j[j.len() - 1],
                    j.len() - 1
                ),
            }
        }
        Err(e) => Outcome { passed: false, detail: e.to_string() },
    }
}

fn metrics() -> Outcome {
    let mut mismatches = 0;
    let mut cases = 0;
    for n in 1..=12usize {
        for c in 0..=n {
            for k in 1..=n {
                // every k-subset of n draws where draws 0..c are correct
                let (mut hit, mut total) = (0u64, 0u64);
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize == k {
                        total += 1;
                        if mask & ((1u32 << c) - 1) != 0 {
                            hit += 1;
                        }
                    }
                }
                let exact = pass_at_k_exact(n, c, k).unwrap();
                let float = pass_at_k(n, c, k).unwrap();
                let enumerated = num_rational::Ratio::new(hit as u128, total as u128);
                if exact != enumerated || float != hit as f64 / total as f64 {
                    mismatches += 1;
                }
                cases += 1;
            }
        }
    }
    let half = pass_at_k(16, 1, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<Vec<bool>> = (0..64).map(|_| (0..16).map(|_| rng.gen_bool(0.3)).collect()).collect();
    let mean = samples.iter().flatten().filter(|&&b| b).count() as f64 / (64.0 * 16.0);
    let avg = avg_at_k(&samples, 16).unwrap();
    Outcome {
        passed: mismatches == 0 && half == 0.5 && (avg - mean).abs() <= 1e-12,
        detail: format!("{mismatches} mismatches in {cases} exhaustive pass@k cases; pass@8(16,1) = {half}; avg@16 - mean = {:.1e}", avg - mean),
    }
}

/// Runs every method for every seed into `root/s<seed>/<method>`.
fn toy_runs(root: &Path) -> tempo_core::Result<Vec<Vec<RunSummary>>> {
    let mut all = Vec::new();
    for seed in SEEDS {
        let mut per_seed = Vec::new();
        for method in Method::ALL {
            let mut cfg = RunConfig { out_dir: root.join(format!("s{seed}")), ..Default::default() };
            cfg.ttt.method = method;
            cfg.apply_seed(seed);
            per_seed.push(load_summary(&run_experiment(&cfg)?)?);
        }
        all.push(per_seed);
    }
    Ok(all)
}

fn find(runs: &[RunSummary], m: Method) -> &RunSummary {
    runs.iter().find(|r| r.method == m).expect("every method ran")
}

fn curve(root: &Path, seed: u64, m: Method) -> Vec<EvalRecord> {
    read_metric_log(&root.join(format!("s{seed}")).join(m.name()).join("metrics.jsonl")).expect("metric log").1
}

fn avg16(r: &EvalRecord) -> f64 {
    r.avg(16).expect("avg@16 logged")
}

fn table_reproduction(runs: &[Vec<RunSummary>]) -> Outcome {
    let n = runs.len();
    let mut gains = Vec::new();
    let (mut beats_ttrl, mut beats_empo, mut pass_wins) = (0, 0, 0);
    let (mut ttrl_drop, mut tempo_drop) = (0.0, 0.0);
    for r in runs {
        let (tempo, ttrl, empo) = (find(r, Method::Tempo), find(r, Method::Ttrl), find(r, Method::Empo));
        gains.push(avg16(&tempo.last) - avg16(&tempo.stage1));
        beats_ttrl += (avg16(&tempo.last) >= avg16(&ttrl.last)) as usize;
        beats_empo += (avg16(&tempo.last) >= avg16(&empo.last)) as usize;
        pass_wins += (tempo.last.pass(8) >= ttrl.last.pass(8)) as usize;
        ttrl_drop += (ttrl.stage1.answer_entropy - ttrl.last.answer_entropy) / n as f64;
        tempo_drop += (tempo.stage1.answer_entropy - tempo.last.answer_entropy) / n as f64;
    }
    let mean_gain = gains.iter().sum::<f64>() / n as f64;
    let gain_seeds = gains.iter().filter(|&&g| g >= 0.05).count();
    let passed =
        mean_gain >= 0.05 && gain_seeds * 2 > n && beats_ttrl >= 4 && beats_empo >= 4 && ttrl_drop > 0.0 && tempo_drop < ttrl_drop && pass_wins >= 4;
    Outcome {
        passed,
        detail: format!(
            "TEMPO avg@16 gain mean {mean_gain:+.3} ({gain_seeds}/{n} seeds >= 0.05); TEMPO >= TTRL {beats_ttrl}/{n}, >= EMPO {beats_empo}/{n}; \
             entropy drop TTRL {ttrl_drop:.3} vs TEMPO {tempo_drop:.3}; pass@8 TEMPO >= TTRL {pass_wins}/{n}"
        ),
    }
}

fn ablations(root: &Path, runs: &[Vec<RunSummary>]) -> Outcome {
    let n = runs.len();
    let (mut early_match, mut late_gap, mut sup_small, mut tempo_big) = (0, 0, 0, 0);
    for (r, seed) in runs.iter().zip(SEEDS) {
        let tempo = curve(root, seed, Method::Tempo);
        let frozen = curve(root, seed, Method::FrozenCritic);
        let close = tempo.iter().zip(&frozen).filter(|(a, _)| a.step <= 50).all(|(a, b)| (avg16(a) - avg16(b)).abs() <= 0.02);
        early_match += close as usize;
        let (t_end, f_end) = (tempo.last().unwrap(), frozen.last().unwrap());
        late_gap += (avg16(t_end) - avg16(f_end) >= 0.03) as usize;
        let sup = find(r, Method::SupervisedPpo);
        sup_small += (avg16(&sup.last) - avg16(&sup.stage1) < 0.02) as usize;
        let t = find(r, Method::Tempo);
        tempo_big += (avg16(&t.last) - avg16(&t.stage1) >= 0.05) as usize;
    }
    Outcome {
        passed: early_match >= 4 && late_gap >= 4 && sup_small >= 4 && tempo_big >= 4,
        detail: format!(
            "frozen critic within 0.02 up to iteration 50 in {early_match}/{n}, >= 0.03 behind at the end in {late_gap}/{n}; \
             supervised gain < 0.02 in {sup_small}/{n}; TEMPO gain >= 0.05 in {tempo_big}/{n}"
        ),
    }
}

fn hygiene(root: &Path, runs: &[Vec<RunSummary>]) -> Outcome {
    let reads: usize = runs.iter().flatten().map(|r| r.training_reads).sum();
    let mut identical = 0;
    for method in Method::ALL {
        let logs: Vec<Vec<u8>> = ["a", "b"]
            .iter()
            .map(|tag| {
                let mut cfg = RunConfig { out_dir: root.join("determinism").join(tag), ..Default::default() };
                cfg.stage1.steps = 30;
                cfg.ttt.iterations = 20;
                cfg.ttt.method = method;
                cfg.apply_seed(17);
                let dir = run_experiment(&cfg).expect("short run");
                std::fs::read(dir.join("metrics.jsonl")).expect("metric log")
            })
            .collect();
        identical += (logs[0] == logs[1]) as usize;
    }
    let total = Method::ALL.len();
    Outcome {
        passed: reads == 0 && identical == total,
        detail: format!("{reads} training-path gold reads over {} runs; {identical}/{total} methods with byte-identical logs", runs.len() * total),
    }
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let root: PathBuf = scratch.path().to_path_buf();
    let mut ok = true;
    let mins = |m: u64| Duration::from_secs(60 * m);

    let t = Instant::now();
    let o = gradients();
    ok &= line(1, "gradient suite", &o, t.elapsed(), mins(1), true);

    let t = Instant::now();
    let o = elbo_suite();
    ok &= line(2, "ELBO suite", &o, t.elapsed(), mins(2), true);

    let t = Instant::now();
    let o = critic_as_posterior();
    ok &= line(3, "critic as posterior", &o, t.elapsed(), mins(5), true);

    let t = Instant::now();
    let o = em_monotonicity();
    ok &= line(4, "EM monotonicity", &o, t.elapsed(), mins(5), true);

    let t = Instant::now();
    let runs = toy_runs(&root);
    let toy_time = t.elapsed();
    match &runs {
        Ok(runs) => {
            let o = table_reproduction(runs);
            line(5, "toy table reproduction", &o, toy_time, mins(30), false);
            let o = ablations(&root, runs);
            line(6, "ablation reproduction", &o, toy_time, mins(30), false);
        }
        Err(e) => {
            let o = Outcome { passed: false, detail: format!("toy runs failed: {e}") };
            ok &= line(5, "toy table reproduction", &o, toy_time, mins(30), true);
            ok &= line(6, "ablation reproduction", &o, toy_time, mins(30), true);
        }
    }

    let t = Instant::now();
    let o = metrics();
    ok &= line(7, "metric correctness", &o, t.elapsed(), Duration::from_secs(10), true);

    let t = Instant::now();
    let o = match &runs {
        Ok(runs) => hygiene(&root, runs),
        Err(e) => Outcome { passed: false, detail: format!("toy runs failed: {e}") },
    };
    ok &= line(8, "hygiene and determinism", &o, t.elapsed(), mins(5), true);

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalRecord;
use crate::emloop::{CallCounts, Method};
use crate::error::Result;

/// Written to `summary.json` at the end of every Stage-2 run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub iterations: usize,
    /// Evaluation of the Stage-1 policy on the unlabeled split.
    pub stage1: EvalRecord,
    /// Last evaluation on the unlabeled split.
    #[serde(rename = "final")]
    pub last: EvalRecord,
    /// Final evaluation on the holdout pool, when configured.
    pub holdout: Option<EvalRecord>,
    pub counts: CallCounts,
    /// Refused gold-answer reads on sealed tasks from training code.
    pub training_reads: usize,
    pub pass_estimator: String,
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(dir.join("summary.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub seeds: usize,
    pub stage1_avg: f64,
    pub final_avg: f64,
    pub final_pass: f64,
    pub stage1_entropy: f64,
    pub final_entropy: f64,
}

/// Per-seed comparison of TEMPO against one other method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paired {
    pub other: Method,
    pub seeds: usize,
    /// Seeds where TEMPO's final avg@k is at least the other method's.
    pub avg_wins: usize,
    pub pass_wins: usize,
    pub mean_avg_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub k_avg: usize,
    pub k_pass: usize,
    pub rows: Vec<MethodRow>,
    pub paired: Vec<Paired>,
    /// Directories without a readable summary.
    pub skipped: Vec<PathBuf>,
    pub table: String,
}

/// Groups run summaries by method and pairs every method with TEMPO by seed.
pub fn compare(dirs: &[PathBuf], k_avg: usize, k_pass: usize) -> Result<CompareReport> {
    let mut by_method: BTreeMap<Method, BTreeMap<u64, RunSummary>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for d in dirs {
        match load_summary(d) {
            Ok(s) => {
                by_method.entry(s.method).or_default().insert(s.seed, s);
            }
            Err(_) => skipped.push(d.clone()),
        }
    }
    let get = |r: &EvalRecord, k: usize, pass: bool| if pass { r.pass(k) } else { r.avg(k) }.unwrap_or(f64::NAN);
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let rows: Vec<MethodRow> = by_method
        .iter()
        .map(|(&method, runs)| MethodRow {
            method,
            seeds: runs.len(),
            stage1_avg: mean(&mut runs.values().map(|s| get(&s.stage1, k_avg, false))),
            final_avg: mean(&mut runs.values().map(|s| get(&s.last, k_avg, false))),
            final_pass: mean(&mut runs.values().map(|s| get(&s.last, k_pass, true))),
            stage1_entropy: mean(&mut runs.values().map(|s| s.stage1.answer_entropy)),
            final_entropy: mean(&mut runs.values().map(|s| s.last.answer_entropy)),
        })
        .collect();
    let mut paired = Vec::new();
    if let Some(tempo) = by_method.get(&Method::Tempo) {
        for (&other, runs) in by_method.iter().filter(|(m, _)| **m != Method::Tempo) {
            let common: Vec<(&RunSummary, &RunSummary)> = tempo.iter().filter_map(|(seed, t)| runs.get(seed).map(|o| (t, o))).collect();
            paired.push(Paired {
                other,
                seeds: common.len(),
                avg_wins: common.iter().filter(|(t, o)| get(&t.last, k_avg, false) >= get(&o.last, k_avg, false)).count(),
                pass_wins: common.iter().filter(|(t, o)| get(&t.last, k_pass, true) >= get(&o.last, k_pass, true)).count(),
                mean_avg_gap: mean(&mut common.iter().map(|(t, o)| get(&t.last, k_avg, false) - get(&o.last, k_avg, false))),
            });
        }
    }
    let mut table = String::new();
    writeln!(table, "| method | seeds | stage-1 avg@{k_avg} | final avg@{k_avg} | final pass@{k_pass} | entropy start | entropy end |").unwrap();
    writeln!(table, "|---|---|---|---|---|---|---|").unwrap();
    for r in &rows {
        writeln!(
            table,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.method, r.seeds, r.stage1_avg, r.final_avg, r.final_pass, r.stage1_entropy, r.final_entropy
        )
        .unwrap();
    }
    for p in &paired {
        writeln!(
            table,
            "\ntempo vs {}: avg@{k_avg} >= in {}/{} seeds (mean gap {:+.4}), pass@{k_pass} >= in {}/{} seeds",
            p.other, p.avg_wins, p.seeds, p.mean_avg_gap, p.pass_wins, p.seeds
        )
        .unwrap();
    }
    writeln!(table, "\npass@k uses the unbiased estimator 1 - C(n-c,k)/C(n,k) over n samples per task.").unwrap();
    Ok(CompareReport { k_avg, k_pass, rows, paired, skipped, table })
}

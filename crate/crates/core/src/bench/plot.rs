use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::{read_metric_log, EvalRecord, LogHeader};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotReport {
    pub written: Vec<PathBuf>,
    /// Run directories whose metric log was missing or unreadable, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

type Series = (String, Vec<(f64, f64)>);
type Metric = (String, String, Box<dyn Fn(&EvalRecord) -> Option<f64>>);

fn chart(path: &Path, title: &str, series: &[Series]) -> Result<()> {
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-3);
    let plot_err = |e: &dyn std::fmt::Display| Error::Io(std::io::Error::other(format!("plot {}: {e}", path.display())));
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut ch = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(|e| plot_err(&e))?;
    ch.configure_mesh().x_desc("iteration").y_desc(title).draw().map_err(|e| plot_err(&e))?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        ch.draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    ch.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// One SVG per metric under `out`, overlaying every run that has a metric
/// log. Output depends only on the logs.
pub fn emit_plots(runs: &[PathBuf], out: &Path) -> Result<PlotReport> {
    let mut report = PlotReport::default();
    let mut logs: Vec<(LogHeader, Vec<EvalRecord>)> = Vec::new();
    for dir in runs {
        match read_metric_log(&dir.join("metrics.jsonl")) {
            Ok(l) => logs.push(l),
            Err(e) => report.skipped.push((dir.clone(), e.to_string())),
        }
    }
    if logs.is_empty() {
        return Ok(report);
    }
    std::fs::create_dir_all(out)?;
    let label = |h: &LogHeader| format!("{} seed {}", h.method, h.seed);
    let avg_ks: BTreeSet<usize> = logs.iter().flat_map(|(_, rs)| rs.iter().flat_map(|r| r.avg_at_k.keys().copied())).collect();
    let pass_ks: BTreeSet<usize> = logs.iter().flat_map(|(_, rs)| rs.iter().flat_map(|r| r.pass_at_k.keys().copied())).collect();
    let mut metrics: Vec<Metric> = Vec::new();
    for &k in &avg_ks {
        metrics.push((format!("avg_at_{k}"), format!("avg@{k}"), Box::new(move |r: &EvalRecord| r.avg(k))));
    }
    for &k in &pass_ks {
        metrics.push((format!("pass_at_{k}"), format!("pass@{k}"), Box::new(move |r: &EvalRecord| r.pass(k))));
    }
    metrics.push(("answer_entropy".into(), "answer entropy (nats)".into(), Box::new(|r: &EvalRecord| Some(r.answer_entropy))));
    metrics.push(("exact_objective".into(), "exact J (tight ELBO)".into(), Box::new(|r: &EvalRecord| r.exact_objective.filter(|x| x.is_finite()))));
    for (file, title, get) in metrics {
        let series: Vec<Series> = logs
            .iter()
            .map(|(h, rs)| (label(h), rs.iter().filter_map(|r| get(r).map(|y| (r.step as f64, y))).collect::<Vec<_>>()))
            .filter(|(_, pts)| !pts.is_empty())
            .collect();
        if series.is_empty() {
            continue;
        }
        let path = out.join(format!("{file}.svg"));
        chart(&path, &title, &series)?;
        report.written.push(path);
    }
    Ok(report)
}

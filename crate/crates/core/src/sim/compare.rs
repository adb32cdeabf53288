//! Multi-seed controller comparison.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

use super::config::{ControllerKind, SimConfig};
use super::engine::run_scenario;
use super::metrics::MetricsSummary;

/// Metrics for which a smaller value is the better outcome.
const LOWER_IS_BETTER: &[&str] = &[
    "carbon_per_bit",
    "carbon_g",
    "handover_jitter_max_ms",
    "handover_jitter_p99_ms",
    "handover_downtime_s",
    "type_i_outage_ticks",
    "type_i_unsafe_ticks",
    "latency_slo_violations",
];

pub fn lower_is_better(metric: &str) -> bool {
    LOWER_IS_BETTER.contains(&metric)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub controller: ControllerKind,
    pub seed: u64,
    pub metrics: MetricsSummary,
}

/// Long-form metric row: `metric,controller,seed,value`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub controller: String,
    pub seed: u64,
    pub value: f64,
}

/// One (controller, metric) line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub metric: String,
    pub controller: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 with fewer than two runs.
    pub std: f64,
    /// Controller the improvement is measured for.
    pub reference: String,
    /// Relative improvement of `reference` over this controller, percent,
    /// signed so that positive is better. Empty when undefined.
    pub improvement_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every (controller, seed) pair on worker threads. Results are ordered
/// by controller as given, then by seed.
pub fn compare(cfg: &SimConfig, controllers: &[ControllerKind], seeds: &[u64]) -> Result<Comparison> {
    if controllers.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one controller and one seed".into()));
    }
    cfg.validate()?;
    let jobs: Vec<(ControllerKind, u64)> =
        controllers.iter().flat_map(|c| seeds.iter().map(move |s| (*c, *s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(controller, seed)| {
            let mut c = cfg.clone();
            c.controller = controller;
            run_scenario(&c, seed).map(|out| RunResult { controller, seed, metrics: out.metrics })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&runs, controllers);
    Ok(Comparison { runs, summary })
}

pub fn metric_rows(runs: &[RunResult]) -> Vec<MetricRow> {
    runs.iter()
        .flat_map(|r| {
            r.metrics.scalars().into_iter().map(move |(m, v)| MetricRow {
                metric: m.into(),
                controller: r.controller.name().into(),
                seed: r.seed,
                value: v,
            })
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Relative improvement of `ours` over `theirs`, percent.
pub fn improvement_percent(metric: &str, ours: f64, theirs: f64) -> Option<f64> {
    if ours == theirs {
        return Some(0.0);
    }
    if theirs == 0.0 || !ours.is_finite() || !theirs.is_finite() {
        return None;
    }
    let gain = if lower_is_better(metric) { theirs - ours } else { ours - theirs };
    Some(100.0 * gain / theirs.abs())
}

/// Per-(controller, metric) statistics. The reference controller is `ai`
/// when present, otherwise the first one listed.
pub fn summarize(runs: &[RunResult], controllers: &[ControllerKind]) -> Vec<SummaryRow> {
    let reference = controllers.iter().copied().find(|c| *c == ControllerKind::Ai).unwrap_or(controllers[0]);
    let rows = metric_rows(runs);
    let mut metrics: Vec<String> = Vec::new();
    for r in &rows {
        if !metrics.contains(&r.metric) {
            metrics.push(r.metric.clone());
        }
    }
    let stats = |c: ControllerKind, m: &str| {
        let xs: Vec<f64> = rows.iter().filter(|r| r.controller == c.name() && r.metric == m).map(|r| r.value).collect();
        let (mean, std) = mean_std(&xs);
        (xs.len(), mean, std)
    };
    let mut out = Vec::new();
    for c in controllers {
        for m in &metrics {
            let (n, mean, std) = stats(*c, m);
            if n == 0 {
                continue;
            }
            let (rn, rmean, _) = stats(reference, m);
            let improvement = if rn == 0 { None } else { improvement_percent(m, rmean, mean) };
            out.push(SummaryRow {
                metric: m.clone(),
                controller: c.name().into(),
                n,
                mean,
                std,
                reference: reference.name().into(),
                improvement_percent: improvement,
            });
        }
    }
    out
}

pub fn write_metric_rows<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    // Keep the header even when there are no rows.
    if rows.is_empty() {
        w.write_record(["metric", "controller", "seed", "value"]).map_err(|e| Error::Io(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["metric", "controller", "n", "mean", "std", "reference", "improvement_percent"])
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

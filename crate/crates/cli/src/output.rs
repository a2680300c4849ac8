//! `trace.csv`, `summary.json` and `sweep.csv`.

use std::io::Write;
use std::path::Path;

use decbandit::sim::{Aggregate, ExperimentConfig, Trace};
use serde::Serialize;

use crate::CliError;

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Serialize)]
struct TraceRow {
    t: usize,
    regret_mean: f64,
    regret_std: f64,
    per_agent_regret_mean: f64,
    comm_scalars_cum: f64,
    phases_cum: f64,
    violations_cum: f64,
}

/// CSV bytes of an aggregate; `\n` line endings, header first.
pub fn trace_csv(agg: &Aggregate) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for k in 0..agg.t.len() {
        w.serialize(TraceRow {
            t: agg.t[k],
            regret_mean: agg.regret_mean[k],
            regret_std: agg.regret_std[k],
            per_agent_regret_mean: agg.per_agent_regret_mean[k],
            comm_scalars_cum: agg.comm_scalars_cum[k],
            phases_cum: agg.phases_cum[k],
            violations_cum: agg.violations_cum[k],
        })?;
    }
    if agg.t.is_empty() {
        w.write_record([
            "t",
            "regret_mean",
            "regret_std",
            "per_agent_regret_mean",
            "comm_scalars_cum",
            "phases_cum",
            "violations_cum",
        ])?;
    }
    w.into_inner().map_err(|e| CliError::io("trace.csv", e.into_error()))
}

#[derive(Clone, Debug, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat {
            mean,
            std,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundSummary {
    pub mean: f64,
    /// Realizations whose final regret stayed at or below their bound.
    pub realizations_within: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub realizations: usize,
    pub final_regret: Stat,
    pub per_agent_final_regret_mean: f64,
    pub theoretical_bound: Option<BoundSummary>,
    pub phase_count: f64,
    pub total_comm: f64,
    #[serde(rename = "S")]
    pub s: usize,
    pub lambda2_abs: f64,
    /// Per realization, when the graph is resampled.
    #[serde(rename = "S_per_realization", skip_serializing_if = "Option::is_none")]
    pub s_per_realization: Option<Vec<usize>>,
    pub violations: usize,
    pub max_violation: f64,
}

pub fn summarize(cfg: &ExperimentConfig, traces: &[Trace], agg: &Aggregate) -> Summary {
    let finals: Vec<f64> = traces.iter().map(|t| t.summary.final_regret).collect();
    let bounds: Option<Vec<f64>> = traces.iter().map(|t| t.summary.bound).collect();
    let theoretical_bound = bounds.filter(|b| !b.is_empty()).map(|b| BoundSummary {
        mean: b.iter().sum::<f64>() / b.len() as f64,
        realizations_within: b.iter().zip(&finals).filter(|(b, r)| r <= b).count(),
    });
    let ss: Vec<usize> = traces.iter().map(|t| t.summary.s).collect();
    let first = &traces[0].summary;
    Summary {
        config: cfg.clone(),
        realizations: traces.len(),
        final_regret: Stat::of(&finals),
        per_agent_final_regret_mean: agg.per_agent_regret_mean.last().copied().unwrap_or(0.0),
        theoretical_bound,
        phase_count: agg.phase_count_mean,
        total_comm: agg.comm_scalars_cum.last().copied().unwrap_or(0.0),
        s: first.s,
        lambda2_abs: first.lambda2_abs,
        s_per_realization: ss.iter().any(|&s| s != first.s).then_some(ss),
        violations: traces.iter().map(|t| t.summary.violations).sum(),
        max_violation: traces.iter().map(|t| t.summary.max_violation).fold(0.0, f64::max),
    }
}

/// Creates `dir` and refuses to clobber earlier results unless `overwrite`.
pub fn prepare_dir(dir: &Path, overwrite: bool, files: &[&str]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    if !overwrite {
        if let Some(f) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(CliError::Config(format!(
                "{} exists; pass --overwrite to replace it",
                f.display()
            )));
        }
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_results(dir: &Path, summary: &Summary, agg: &Aggregate) -> Result<(), CliError> {
    write_file(&dir.join(TRACE_FILE), &trace_csv(agg)?)?;
    let mut json = serde_json::to_vec_pretty(summary)?;
    json.push(b'\n');
    write_file(&dir.join(SUMMARY_FILE), &json)
}

#[derive(Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub final_regret_mean: f64,
    pub final_regret_std: f64,
    pub per_agent_regret_mean: f64,
    pub total_comm: f64,
    pub phase_count_mean: f64,
    pub violations: usize,
    pub bound_mean: Option<f64>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::io("sweep.csv", e.into_error()))
}

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{Method, ScenarioConfig};
use super::episode::{run_episode, Episode, StepLog};
use super::metrics::Metrics;
use crate::error::{PisacError, Result};

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: [&str; 11] = [
    "method",
    "seed",
    "snr_db",
    "avg_acc",
    "max_acc",
    "pass_time",
    "traj_length",
    "success",
    "failure_reason",
    "sum_rate",
    "crb_trace",
];

/// Per (method, SNR) averages over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub method: Method,
    pub snr_db: f64,
    pub episodes: usize,
    pub success_rate: f64,
    pub avg_acc: f64,
    pub max_acc: f64,
    /// Mean over successful runs only.
    pub pass_time: Option<f64>,
    pub traj_length: f64,
    pub sum_rate: f64,
    pub crb_trace: f64,
}

pub struct SweepResult {
    pub episodes: Vec<Episode>,
    pub aggregates: Vec<AggregateRow>,
}

/// Runs the cross product of methods, seeds and SNRs in parallel. The
/// result order follows the input order (SNR, then method, then seed).
pub fn run_sweep(config: &ScenarioConfig, methods: &[Method], seeds: &[u64], snrs_db: &[f64]) -> Result<SweepResult> {
    let jobs: Vec<ScenarioConfig> = snrs_db
        .iter()
        .flat_map(|&snr| methods.iter().flat_map(move |&m| seeds.iter().map(move |&s| (m, s, snr))))
        .map(|(m, s, snr)| config.with_run(m, s, snr))
        .collect();
    let episodes = jobs.par_iter().map(run_episode).collect::<Result<Vec<_>>>()?;
    let metrics: Vec<Metrics> = episodes.iter().map(|e| e.metrics.clone()).collect();
    Ok(SweepResult { aggregates: aggregate(&metrics), episodes })
}

fn mean(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

pub fn aggregate(metrics: &[Metrics]) -> Vec<AggregateRow> {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for m in metrics {
        if !keys.iter().any(|(k, s)| *k == m.method && *s == m.snr_db) {
            keys.push((m.method, m.snr_db));
        }
    }
    keys.into_iter()
        .map(|(method, snr_db)| {
            let group: Vec<&Metrics> = metrics.iter().filter(|m| m.method == method && m.snr_db == snr_db).collect();
            let col = |f: fn(&Metrics) -> f64| mean(&group.iter().map(|m| f(m)).collect::<Vec<_>>());
            let pass: Vec<f64> = group.iter().filter_map(|m| m.pass_time).collect();
            AggregateRow {
                method,
                snr_db,
                episodes: group.len(),
                success_rate: group.iter().filter(|m| m.success).count() as f64 / group.len() as f64,
                avg_acc: col(|m| m.avg_acc),
                max_acc: col(|m| m.max_acc),
                pass_time: (!pass.is_empty()).then(|| mean(&pass)),
                traj_length: col(|m| m.traj_length),
                sum_rate: col(|m| m.sum_rate),
                crb_trace: col(|m| m.crb_trace),
            }
        })
        .collect()
}

fn csv_err(e: csv::Error) -> PisacError {
    PisacError::Io(e.to_string())
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub fn write_metrics_csv(path: &Path, metrics: &[Metrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for m in metrics {
        w.write_record([
            m.method.to_string(),
            m.seed.to_string(),
            num(m.snr_db),
            num(m.avg_acc),
            num(m.max_acc),
            m.pass_time.map(num).unwrap_or_default(),
            num(m.traj_length),
            m.success.to_string(),
            m.failure_reason.map(|r| r.to_string()).unwrap_or_default(),
            num(m.sum_rate),
            num(m.crb_trace),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregates_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "method",
        "snr_db",
        "episodes",
        "success_rate",
        "avg_acc",
        "max_acc",
        "pass_time",
        "traj_length",
        "sum_rate",
        "crb_trace",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            num(r.snr_db),
            r.episodes.to_string(),
            num(r.success_rate),
            num(r.avg_acc),
            num(r.max_acc),
            r.pass_time.map(num).unwrap_or_default(),
            num(r.traj_length),
            num(r.sum_rate),
            num(r.crb_trace),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one JSON object per step.
pub fn write_step_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for record in log {
        let line = serde_json::to_string(record).map_err(|e| PisacError::Io(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn episode_log_name(method: Method, seed: u64) -> String {
    format!("episode_{method}_{seed}.jsonl")
}

/// Parses `a..b` (inclusive) or a comma list of seeds.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || PisacError::Config(format!("cannot parse seeds '{text}' (expected a..b or a,b,c)"));
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>> {
    let items: Vec<T> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| PisacError::Config(format!("cannot parse '{s}'"))))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(PisacError::Config(format!("empty list '{text}'")));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds("5,7").unwrap(), vec![5, 7]);
        assert!(parse_seeds("3..1").is_err());
        assert_eq!(parse_list::<f64>("30, 40").unwrap(), vec![30.0, 40.0]);
        assert_eq!(parse_list::<Method>("pisac,srm").unwrap(), vec![Method::Pisac, Method::Srm]);
    }
}

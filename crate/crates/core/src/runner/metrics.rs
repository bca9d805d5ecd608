use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{Method, ScenarioConfig};
use super::episode::{StepLog, StepStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Collision,
    Timeout,
    Stuck,
    PlannerFailure,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureReason::Collision => "collision",
            FailureReason::Timeout => "timeout",
            FailureReason::Stuck => "stuck",
            FailureReason::PlannerFailure => "planner_failure",
        })
    }
}

/// Episode summary; one row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: Method,
    pub seed: u64,
    pub snr_db: f64,
    /// Mean absolute longitudinal acceleration (m/s^2).
    pub avg_acc: f64,
    pub max_acc: f64,
    /// Time to reach the goal; `None` unless the run succeeded.
    pub pass_time: Option<f64>,
    pub traj_length: f64,
    pub success: bool,
    pub failure_reason: Option<FailureReason>,
    /// Per-step means.
    pub sum_rate: f64,
    pub crb_trace: f64,
    pub steps: usize,
    /// Fraction of planning calls that converged.
    pub converged_fraction: f64,
    pub min_true_clearance: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Derives the episode metrics from its log. Accelerations are finite
/// differences of the applied speed, starting from the initial speed.
pub fn compute_metrics(log: &[StepLog], config: &ScenarioConfig) -> Metrics {
    let dt = config.planner.dynamics.dt;
    let mut speeds = vec![config.ego.initial_speed];
    speeds.extend(log.iter().filter(|s| s.plan.is_some()).map(|s| s.control[0]));
    let accs: Vec<f64> = speeds.windows(2).map(|w| ((w[1] - w[0]) / dt).abs()).collect();
    let avg_acc = if accs.is_empty() { 0.0 } else { accs.iter().sum::<f64>() / accs.len() as f64 };
    let max_acc = accs.iter().copied().fold(0.0, f64::max);

    let mut traj_length = 0.0;
    let mut last = [config.ego.start[0], config.ego.start[1]];
    for s in log {
        let p = [s.ev_pose[0], s.ev_pose[1]];
        traj_length += ((p[0] - last[0]).powi(2) + (p[1] - last[1]).powi(2)).sqrt();
        last = p;
    }

    let status = log.last().map_or(StepStatus::PlannerFailure, |s| s.status);
    let failure_reason = match status {
        StepStatus::Goal => None,
        StepStatus::Collision => Some(FailureReason::Collision),
        StepStatus::Stuck => Some(FailureReason::Stuck),
        StepStatus::Timeout | StepStatus::Running => Some(FailureReason::Timeout),
        StepStatus::PlannerFailure => Some(FailureReason::PlannerFailure),
    };
    let success = failure_reason.is_none();
    let planned: Vec<bool> = log.iter().filter_map(|s| s.plan.as_ref().map(|p| p.converged)).collect();
    let converged_fraction =
        if planned.is_empty() { 0.0 } else { planned.iter().filter(|c| **c).count() as f64 / planned.len() as f64 };

    Metrics {
        method: config.isac.method,
        seed: config.seed,
        snr_db: config.isac.snr_db,
        avg_acc,
        max_acc,
        pass_time: success.then(|| log.len() as f64 * dt),
        traj_length,
        success,
        failure_reason,
        sum_rate: mean(log.iter().map(|s| s.sum_rate)),
        crb_trace: mean(log.iter().map(|s| s.crb_trace)),
        steps: log.len(),
        converged_fraction,
        min_true_clearance: log.iter().map(|s| s.true_clearance).filter(|c| !c.is_nan()).fold(f64::INFINITY, f64::min),
    }
}

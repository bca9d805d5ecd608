//! Receding-horizon trajectory planning around (possibly inflated)
//! rectangular obstacles. Collision avoidance uses the dual form of the
//! polytope distance; the problem is solved by alternating between the
//! per-pair dual subproblems and a convex QP in the controls.

mod dual;
mod dynamics;
pub mod qp;
mod scp;

pub use dual::{dual_distance, DualCertificate};
pub use dynamics::{linearize_dynamics, Control, DynamicsModel, LinearStep};
pub use scp::{plan, plan_rda_baseline, plan_rects, plan_with_restarts};

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{PisacError, Result};
use crate::geometry::{normalize_angle, Pose2, Vec2};

/// Straight-line reference `s_0 .. s_H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePath {
    pub waypoints: Vec<Pose2>,
}

impl ReferencePath {
    pub fn horizon(&self) -> usize {
        self.waypoints.len().saturating_sub(1)
    }
}

/// Samples the line from `start` to `goal` at `speed * dt` spacing,
/// clamped at the goal. Every waypoint faces along the line.
pub fn sample_reference(
    start: &Pose2,
    goal: &Pose2,
    speed: f64,
    dynamics: &DynamicsModel,
    horizon: usize,
) -> Result<ReferencePath> {
    let delta: Vec2 = goal.position() - start.position();
    let length = delta.norm();
    if length < 1e-9 {
        return Err(PisacError::InvalidGeometry("reference start and goal coincide".into()));
    }
    if !(speed >= 0.0) || horizon == 0 {
        return Err(PisacError::Config("reference speed must be nonnegative and horizon positive".into()));
    }
    let dir = delta / length;
    let heading = dir.y.atan2(dir.x);
    let waypoints = (0..=horizon)
        .map(|t| {
            let s = (t as f64 * speed * dynamics.dt).min(length);
            let p = start.position() + dir * s;
            Pose2::new(p.x, p.y, heading)
        })
        .collect();
    Ok(ReferencePath { waypoints })
}

/// Dual variables per obstacle `k` and time step `t`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DualVars {
    pub lambda: Vec<Vec<Vector4<f64>>>,
    pub mu: Vec<Vec<Vector4<f64>>>,
}

/// Solver settings for [`plan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub tol_traj: f64,
    /// Relative merit decrease below which an accepted step ends the loop.
    pub tol_merit: f64,
    pub max_iters: usize,
    /// Per-iterate trust region on the speed (m/s) and steering (rad)
    /// increments.
    pub trust_speed: f64,
    pub trust_steer: f64,
    pub heading_weight: f64,
    /// Small proximal weight keeping the QP strictly convex.
    pub proximal: f64,
    /// Penalty per meter of clearance shortfall, summed over steps.
    pub slack_penalty: f64,
    /// Pairs farther than `d_safe + activation_margin` are left out of the QP.
    pub activation_margin: f64,
    /// Ego footprint; set from the scenario's ego section.
    #[serde(skip)]
    pub ev_length: f64,
    #[serde(skip)]
    pub ev_width: f64,
    /// Plan anyway when the start pose overlaps an obstacle.
    pub relax_infeasible_start: bool,
    pub qp_max_iters: usize,
    /// Sideways reference offsets (m, positive left) tried by
    /// [`plan_with_restarts`].
    pub lateral_restarts: Vec<f64>,
    /// Progress ratio below which a converged plan still triggers restarts.
    pub restart_progress: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            tol_traj: 1e-3,
            tol_merit: 1e-6,
            max_iters: 100,
            trust_speed: 1.0,
            trust_steer: 0.1,
            heading_weight: 1.0,
            proximal: 1e-6,
            slack_penalty: 1e5,
            activation_margin: 1.0,
            ev_length: 4.694,
            ev_width: 1.849,
            relax_infeasible_start: false,
            qp_max_iters: 80,
            lateral_restarts: vec![-1.2, 1.2],
            restart_progress: 0.75,
        }
    }
}

/// Optional warm-start information for one planning call.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    /// Actual ego pose; defaults to the first waypoint.
    pub start: Option<Pose2>,
    /// Control applied at the previous step, anchoring the delta bounds.
    pub u_prev: Option<Control>,
    /// Initial control sequence, e.g. the shifted previous plan.
    pub guess: Option<Vec<Control>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub states: Vec<Pose2>,
    pub controls: Vec<Control>,
    pub duals: DualVars,
    /// Affine dynamics at the returned trajectory, one per step.
    pub linearization: Vec<LinearStep>,
    pub tracking_cost: f64,
    /// Smallest geometric clearance over `t = 1..H`; infinite without obstacles.
    pub min_clearance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Merit value (tracking cost plus clearance penalty) of each accepted iterate.
    pub merit_history: Vec<f64>,
}

impl PlanResult {
    /// Largest mismatch between the stored states and a replay under the
    /// stored affine dynamics.
    pub fn replay_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (t, lin) in self.linearization.iter().enumerate() {
            let s = &self.states[t];
            let next = lin.apply(&Vector3::new(s.x, s.y, s.theta), &self.controls[t]);
            let target = &self.states[t + 1];
            worst = worst
                .max((next[0] - target.x).abs())
                .max((next[1] - target.y).abs())
                .max(normalize_angle(next[2] - target.theta).abs());
        }
        worst
    }

    /// Largest `|D^T lambda|` over all pairs.
    pub fn max_dual_norm(&self, obstacle_normals: &[[Vec2; 4]]) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, per_t) in self.duals.lambda.iter().enumerate() {
            for l in per_t {
                let w: Vec2 = (0..4).map(|i| obstacle_normals[k][i] * l[i]).sum();
                worst = worst.max(w.norm());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reference_progression() {
        let dynamics = DynamicsModel::default();
        let r = sample_reference(&Pose2::new(0.0, 0.0, 0.0), &Pose2::new(0.0, 10.0, 0.0), 5.0, &dynamics, 20).unwrap();
        assert_eq!(r.waypoints.len(), 21);
        for (t, w) in r.waypoints.iter().enumerate() {
            assert_abs_diff_eq!(w.y, 0.5 * t as f64, epsilon = 1e-12);
            assert_abs_diff_eq!(w.theta, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        }
        let held = sample_reference(&Pose2::new(0.0, 0.0, 0.0), &Pose2::new(0.0, 3.0, 0.0), 5.0, &dynamics, 20).unwrap();
        assert_abs_diff_eq!(held.waypoints[20].y, 3.0);
        assert_abs_diff_eq!(held.waypoints[7].y, 3.0);
        let short = sample_reference(&Pose2::new(0.0, 0.0, 0.0), &Pose2::new(0.0, 100.0, 0.0), 5.0, &dynamics, 20).unwrap();
        assert!(short.waypoints[20].y < 100.0);
        assert!(sample_reference(&Pose2::new(1.0, 1.0, 0.0), &Pose2::new(1.0, 1.0, 0.0), 5.0, &dynamics, 20).is_err());
    }

    #[test]
    fn scenario_heading() {
        let dynamics = DynamicsModel::default();
        let r = sample_reference(&Pose2::new(409.2, 28.0, 0.0), &Pose2::new(409.2, 113.0, 0.0), 6.0, &dynamics, 20).unwrap();
        assert!(r.waypoints.iter().all(|w| (w.theta - std::f64::consts::FRAC_PI_2).abs() < 1e-12));
    }
}

//! Beam power allocation.
//!
//! The planning-oriented allocator minimizes the driving-space shrinkage
//! cost (hinge penalties on disc-pair clearance between inflated obstacles
//! and the ego reference path) plus a CRB regularizer, subject to a sum-rate
//! floor, the power budget and a strictly positive per-beam floor. The
//! baselines (CRB minimization, sum-rate maximization, max-min fairness)
//! share the same problem description.

mod baselines;
mod oracle;
mod separable;

pub use baselines::{solve_mmf, solve_srm, water_fill};
pub use oracle::{grid_oracle, grid_oracle_with};
pub use separable::{solve_crb_min, solve_pisac};

use serde::{Deserialize, Serialize};

use crate::error::{PisacError, Result};
use crate::geometry::{min_disc_distance, DiscPair};
use crate::isac::{sum_rate, CrbModel};
use crate::uncertainty::{chi2_quantile_2dof, inflated_disc_radius};

/// Per-obstacle data entering the allocation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaTarget {
    pub crb: CrbModel,
    /// Uninflated disc pair at the estimated pose.
    pub discs: DiscPair,
    /// Normalized downlink gain kappa_C^2 |alpha|^2 delta^2 / sigma_C^2.
    pub comm_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaProblem {
    pub targets: Vec<PaTarget>,
    /// Ego disc pairs at the reference waypoints.
    pub ego_discs: Vec<DiscPair>,
    pub d_safe: f64,
    pub risk_eps: f64,
    pub rho: f64,
    pub p_sum: f64,
    pub r0_rate: f64,
    pub p_min: f64,
}

/// Regularizer weight that makes the CRB term at the equal split worth
/// `0.1 d_safe K`, i.e. comparable to a single active hinge.
pub fn default_rho(d_safe: f64, p_sum: f64, crbs: &[CrbModel]) -> f64 {
    let total: f64 = crbs.iter().map(CrbModel::trace).sum();
    if total > 0.0 {
        0.1 * d_safe * p_sum / total
    } else {
        0.0
    }
}

/// Sum-rate floor at 80 % of the equal-split rate.
pub fn default_r0_rate(gains: &[f64], p_sum: f64) -> f64 {
    0.8 * equal_split_rate(gains, p_sum)
}

pub fn equal_split_rate(gains: &[f64], p_sum: f64) -> f64 {
    let k = gains.len().max(1) as f64;
    sum_rate(&vec![p_sum / k; gains.len()], gains)
}

impl PaProblem {
    /// Validates the problem; the equal split must meet the rate floor.
    pub fn new(
        targets: Vec<PaTarget>,
        ego_discs: Vec<DiscPair>,
        d_safe: f64,
        risk_eps: f64,
        rho: f64,
        p_sum: f64,
        r0_rate: f64,
    ) -> Result<Self> {
        let problem = Self { p_min: 1e-6 * p_sum, targets, ego_discs, d_safe, risk_eps, rho, p_sum, r0_rate };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(PisacError::Config("power allocation needs at least one target".into()));
        }
        if !(self.p_sum > 0.0 && self.p_sum.is_finite()) {
            return Err(PisacError::InvalidPower(self.p_sum));
        }
        if !(self.p_min > 0.0) || self.p_min * self.len() as f64 > self.p_sum {
            return Err(PisacError::Config(format!("power floor {} incompatible with budget", self.p_min)));
        }
        if !(self.risk_eps > 0.0 && self.risk_eps < 1.0) {
            return Err(PisacError::Domain(self.risk_eps));
        }
        if !(self.rho >= 0.0) || !(self.d_safe >= 0.0) || !(self.r0_rate >= 0.0) {
            return Err(PisacError::Config("rho, d_safe and r0_rate must be nonnegative".into()));
        }
        if let Some(k) = self.targets.iter().position(|t| !(t.comm_gain > 0.0)) {
            return Err(PisacError::Config(format!("target {k} has a non-positive channel gain")));
        }
        let split = equal_split_rate(&self.gains(), self.p_sum);
        if split + 1e-9 < self.r0_rate {
            return Err(PisacError::Infeasible {
                binding: "sum-rate".into(),
                detail: format!("equal split gives {split:.4} < required {:.4} bit/s/Hz", self.r0_rate),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn gains(&self) -> Vec<f64> {
        self.targets.iter().map(|t| t.comm_gain).collect()
    }

    pub fn quantile(&self) -> f64 {
        chi2_quantile_2dof(1.0 - self.risk_eps).unwrap_or(f64::NAN)
    }

    pub fn rate(&self, powers: &[f64]) -> f64 {
        sum_rate(powers, &self.gains())
    }

    /// Whether `powers` meets every constraint within `slack`.
    pub fn is_feasible(&self, powers: &[f64], slack: f64) -> bool {
        powers.len() == self.len()
            && powers.iter().all(|&p| p >= self.p_min - slack)
            && powers.iter().sum::<f64>() <= self.p_sum + slack
            && self.rate(powers) >= self.r0_rate - slack
    }
}

/// Result of any of the allocators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    pub powers: Vec<f64>,
    /// Value of the allocator's own objective.
    pub objective: f64,
    pub rate: f64,
    pub kkt_residual: f64,
}

/// Clearance `Gamma_{k,t}(p)` between the inflated disc pair of target `k`
/// and the ego disc pair at waypoint `t`.
pub fn disc_clearance(problem: &PaProblem, k: usize, t: usize, p: f64) -> f64 {
    let target = &problem.targets[k];
    let radius = inflated_disc_radius(target.discs.radius, &target.crb, p, problem.quantile());
    min_disc_distance(&target.discs.with_radius(radius), &problem.ego_discs[t])
}

/// Sum over waypoints and targets of `[d_safe - Gamma_{k,t}(p_k)]^+`.
pub fn shrinkage_cost(powers: &[f64], problem: &PaProblem) -> f64 {
    let mut cost = 0.0;
    for (k, &p) in powers.iter().enumerate() {
        for t in 0..problem.ego_discs.len() {
            cost += (problem.d_safe - disc_clearance(problem, k, t, p)).max(0.0);
        }
    }
    cost
}

/// `rho * sum_k (c11 + c22) / p_k`.
pub fn crb_regularizer(powers: &[f64], problem: &PaProblem) -> f64 {
    problem.rho * powers.iter().zip(&problem.targets).map(|(p, t)| t.crb.trace() / p).sum::<f64>()
}

/// Planning-oriented objective, shrinkage cost plus CRB regularizer.
pub fn pisac_objective(powers: &[f64], problem: &PaProblem) -> f64 {
    shrinkage_cost(powers, problem) + crb_regularizer(powers, problem)
}

/// Sum of CRB traces, the CRB-minimization objective.
pub fn crb_trace_sum(powers: &[f64], problem: &PaProblem) -> f64 {
    powers.iter().zip(&problem.targets).map(|(p, t)| t.crb.trace() / p).sum()
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn regularizer_examples() {
        let mut problem = PaProblem::new(
            vec![target_at(10.0, 0.0, 1.5, 0.5, 1.0)],
            ego_path(0.0, 0.5, 3),
            0.15,
            0.05,
            1.0,
            10.0,
            0.0,
        )
        .unwrap();
        assert_relative_eq!(crb_regularizer(&[2.0], &problem), 1.0);
        assert_relative_eq!(crb_regularizer(&[4.0], &problem), 0.5);
        problem.rho = 0.0;
        assert_eq!(crb_regularizer(&[2.0], &problem), 0.0);
    }

    #[test]
    fn hinge_inactive_far_from_path() {
        let problem = PaProblem::new(
            vec![target_at(30.0, 5.0, 1.0, 1.0, 1.0), target_at(-25.0, 2.0, 1.0, 1.0, 1.0)],
            ego_path(0.0, 0.5, 21),
            0.15,
            0.05,
            0.1,
            100.0,
            0.0,
        )
        .unwrap();
        assert_eq!(shrinkage_cost(&[50.0, 50.0], &problem), 0.0);
    }

    #[test]
    fn single_active_hinge() {
        // One ego waypoint; target discs placed so that Gamma = d_safe - 0.1
        // once the (tiny) inflation is included.
        let ego = ego_path(0.0, 0.0, 1);
        let r_e = ego[0].radius;
        let mut target = target_at(0.0, 0.0, 1e-12, 1e-12, 1.0);
        let r_o = target.discs.radius;
        let p = 1.0;
        let q = chi2_quantile_2dof(0.95).unwrap();
        let infl = (q * 2e-12 / p).sqrt();
        let d_safe = 0.15;
        let gap = d_safe - 0.1 + r_e + r_o + infl;
        // Move the target sideways so the nearest centres are `gap` apart.
        for c in target.discs.centers.iter_mut() {
            c.x += gap;
        }
        let problem = PaProblem::new(vec![target], ego, d_safe, 0.05, 0.0, 1.0, 0.0).unwrap();
        assert_relative_eq!(shrinkage_cost(&[p], &problem), 0.1, max_relative = 1e-9);
    }

    #[test]
    fn rate_floor_checked_at_construction() {
        let err = PaProblem::new(
            vec![target_at(10.0, 0.0, 1.0, 1.0, 1.0)],
            ego_path(0.0, 0.5, 2),
            0.15,
            0.05,
            0.1,
            1.0,
            5.0,
        )
        .unwrap_err();
        assert!(matches!(err, PisacError::Infeasible { ref binding, .. } if binding == "sum-rate"));
    }
}

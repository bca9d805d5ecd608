//! Exact solver for the separable allocation problem
//!
//!   min  sum_k f_k(p_k)
//!   s.t. sum_k p_k <= P,  sum_k log2(1 + g_k p_k) >= R0,  p_k >= p_min,
//!
//! with `f_k(p) = sum_t [a_kt + s_k p^-1/2]^+ + w_k / p`. Each `f_k` is convex
//! and nonincreasing, so the budget is tight at an optimum. The solver
//! works on the Lagrangian dual: for fixed multipliers `(nu, eta)` the
//! problem splits into K one-dimensional convex minimizations, solved by
//! bisection on the right derivative. `nu` is found by bisection on the
//! budget and `eta` by bisection on the rate floor. Where a kink makes the
//! primal response jump, the two bracketing responses are blended, which
//! keeps every coordinate inside the minimizer set of its 1-D problem.

use std::f64::consts::LN_2;

use super::{crb_trace_sum, pisac_objective, PaProblem, PowerAllocation};
use crate::error::{PisacError, Result};
use crate::geometry::min_disc_distance;

const BISECT_ITERS: usize = 200;

/// One coordinate of the separable objective.
#[derive(Debug, Clone)]
pub(crate) struct Coordinate {
    /// Hinge offsets sorted in decreasing order.
    offsets: Vec<f64>,
    slope: f64,
    weight: f64,
    gain: f64,
}

impl Coordinate {
    pub(crate) fn new(mut offsets: Vec<f64>, slope: f64, weight: f64, gain: f64) -> Self {
        offsets.sort_by(|a, b| b.total_cmp(a));
        Self { offsets, slope, weight, gain }
    }

    /// Number of hinge terms with `a + s p^-1/2 > 0` (strict) or `>= 0`.
    fn active(&self, p: f64, strict: bool) -> usize {
        let thr = -self.slope / p.sqrt();
        if strict {
            self.offsets.partition_point(|&a| a > thr)
        } else {
            self.offsets.partition_point(|&a| a >= thr)
        }
    }

    #[cfg(test)]
    pub(crate) fn value(&self, p: f64) -> f64 {
        let m = self.active(p, true);
        self.offsets[..m].iter().sum::<f64>() + m as f64 * self.slope / p.sqrt() + self.weight / p
    }

    /// One-sided derivative of `f`; `right` selects the right derivative.
    fn deriv(&self, p: f64, right: bool) -> f64 {
        let m = self.active(p, right);
        -0.5 * m as f64 * self.slope / (p * p.sqrt()) - self.weight / (p * p)
    }

    fn rate_deriv(&self, p: f64) -> f64 {
        self.gain / ((1.0 + self.gain * p) * LN_2)
    }

    /// Minimizer of `f(p) + nu p - eta log2(1 + g p)` over `[lo, hi]`:
    /// the root of the nondecreasing right derivative, by Newton steps
    /// safeguarded with a bisection bracket (kinks make it jump).
    fn argmin(&self, nu: f64, eta: f64, lo: f64, hi: f64) -> f64 {
        let h = |p: f64| self.deriv(p, true) + nu - eta * self.rate_deriv(p);
        if h(lo) >= 0.0 {
            return lo;
        }
        if h(hi) < 0.0 {
            return hi;
        }
        let (mut a, mut b) = (lo, hi);
        let mut p = (lo * hi).sqrt();
        for _ in 0..BISECT_ITERS {
            let v = h(p);
            if v < 0.0 {
                a = p;
            } else {
                b = p;
            }
            if b - a <= 1e-15 * b {
                break;
            }
            let m = self.active(p, true) as f64;
            let gp = 1.0 + self.gain * p;
            let slope = 0.75 * m * self.slope / (p * p * p.sqrt())
                + 2.0 * self.weight / (p * p * p)
                + eta * self.gain * self.gain / (gp * gp * LN_2);
            let newton = p - v / slope;
            if slope > 0.0 && (newton - p).abs() <= 1e-14 * p {
                // Converged from one side: close the bracket just above.
                let q = newton.max(p) * (1.0 + 4e-15);
                if q < b && h(q) >= 0.0 {
                    b = q;
                    break;
                }
            }
            p = if slope > 0.0 && newton > a && newton < b && (newton - p).abs() < 0.5 * (b - a) {
                newton
            } else {
                (a * b).sqrt()
            };
            if p <= a || p >= b {
                p = 0.5 * (a + b);
            }
        }
        b
    }
}

pub(crate) struct Separable {
    pub(crate) coords: Vec<Coordinate>,
    pub(crate) p_sum: f64,
    pub(crate) p_min: f64,
    pub(crate) r0: f64,
}

fn rate_of(coords: &[Coordinate], p: &[f64]) -> f64 {
    coords.iter().zip(p).map(|(c, &x)| (1.0 + c.gain * x).log2()).sum()
}

fn blend(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + alpha * (y - x)).collect()
}

impl Separable {
    fn hi(&self) -> f64 {
        self.p_sum - (self.coords.len() as f64 - 1.0) * self.p_min
    }

    fn response(&self, nu: f64, eta: f64) -> Vec<f64> {
        let (lo, hi) = (self.p_min, self.hi());
        self.coords.iter().map(|c| c.argmin(nu, eta, lo, hi)).collect()
    }

    /// Budget-tight response for a fixed `eta`, with its multiplier.
    fn budget_response(&self, eta: f64) -> (Vec<f64>, f64) {
        let total = |p: &[f64]| p.iter().sum::<f64>();
        let free = self.response(0.0, eta);
        if total(&free) <= self.p_sum {
            return (free, 0.0);
        }
        let mut nu_hi = 1.0;
        while total(&self.response(nu_hi, eta)) > self.p_sum && nu_hi < 1e300 {
            nu_hi *= 16.0;
        }
        let mut nu_lo = nu_hi / 16.0;
        while total(&self.response(nu_lo, eta)) <= self.p_sum && nu_lo > 1e-300 {
            nu_lo /= 16.0;
        }
        for _ in 0..BISECT_ITERS {
            let mid = (nu_lo * nu_hi).sqrt();
            if total(&self.response(mid, eta)) > self.p_sum {
                nu_lo = mid;
            } else {
                nu_hi = mid;
            }
            if nu_hi / nu_lo - 1.0 < 1e-15 {
                break;
            }
        }
        let p_hi = self.response(nu_hi, eta);
        let p_lo = self.response(nu_lo, eta);
        let (s_hi, s_lo) = (total(&p_hi), total(&p_lo));
        let alpha = if s_lo > s_hi { ((self.p_sum - s_hi) / (s_lo - s_hi)).clamp(0.0, 1.0) } else { 0.0 };
        (blend(&p_hi, &p_lo, alpha), nu_hi)
    }

    /// Returns the optimal powers and the multipliers `(nu, eta)`.
    pub(crate) fn solve(&self) -> Result<(Vec<f64>, f64, f64)> {
        let (p0, nu0) = self.budget_response(0.0);
        if rate_of(&self.coords, &p0) >= self.r0 {
            return Ok((p0, nu0, 0.0));
        }
        let mut eta_hi = 1.0;
        loop {
            let (p, _) = self.budget_response(eta_hi);
            if rate_of(&self.coords, &p) >= self.r0 {
                break;
            }
            eta_hi *= 16.0;
            if eta_hi > 1e200 {
                return Err(PisacError::Infeasible {
                    binding: "sum-rate".into(),
                    detail: format!("rate floor {:.6} not reachable within the budget", self.r0),
                });
            }
        }
        let mut eta_lo = 0.0;
        for _ in 0..BISECT_ITERS {
            let mid = if eta_lo == 0.0 { eta_hi / 16.0 } else { (eta_lo * eta_hi).sqrt() };
            if eta_lo == 0.0 && mid < 1e-300 {
                break;
            }
            let (p, _) = self.budget_response(mid);
            if rate_of(&self.coords, &p) >= self.r0 {
                eta_hi = mid;
            } else {
                eta_lo = mid;
            }
            if eta_lo > 0.0 && eta_hi / eta_lo - 1.0 < 1e-15 {
                break;
            }
        }
        let (p_hi, nu) = self.budget_response(eta_hi);
        let (p_lo, _) = self.budget_response(eta_lo);
        let (r_hi, r_lo) = (rate_of(&self.coords, &p_hi), rate_of(&self.coords, &p_lo));
        // Rate is concave, so the blend meets the floor whenever the linear
        // interpolation of the endpoint rates does.
        let alpha = if r_hi > r_lo { ((r_hi - self.r0) / (r_hi - r_lo)).clamp(0.0, 1.0) } else { 0.0 };
        Ok((blend(&p_hi, &p_lo, alpha), nu, eta_hi))
    }

    /// Normalized KKT residual at `p` for multipliers `(nu, eta)`.
    pub(crate) fn kkt_residual(&self, p: &[f64], nu: f64, eta: f64) -> f64 {
        let tol = 1e-12 * self.p_sum;
        let mut worst: f64 = 0.0;
        for (c, &x) in self.coords.iter().zip(p) {
            let shift = nu - eta * c.rate_deriv(x);
            // Subgradient interval over a tiny neighbourhood, so that a
            // point rounded off a kink still sees both one-sided slopes.
            let mut lo = c.deriv(x * (1.0 - 1e-10), false) + shift;
            let mut hi = c.deriv(x * (1.0 + 1e-10), true) + shift;
            // Normal cones of the box: only the sign condition matters there.
            if x <= self.p_min + tol {
                lo = f64::NEG_INFINITY;
            }
            if x >= self.hi() - tol {
                hi = f64::INFINITY;
            }
            let gap = if lo > 0.0 {
                lo
            } else if hi < 0.0 {
                -hi
            } else {
                0.0
            };
            let scale = nu + eta * c.rate_deriv(x) + c.deriv(x, false).abs() + f64::MIN_POSITIVE;
            worst = worst.max(gap / scale);
        }
        let used: f64 = p.iter().sum();
        let rate = rate_of(&self.coords, p);
        let slack_budget = (self.p_sum - used) / self.p_sum;
        worst = worst.max(if nu > 0.0 { slack_budget.abs() } else { (-slack_budget).max(0.0) });
        let rate_scale = self.r0.max(1.0);
        worst = worst.max(((self.r0 - rate) / rate_scale).max(0.0));
        if eta > 0.0 {
            worst = worst.max(((rate - self.r0) / rate_scale).abs());
        }
        let floor_violation = p.iter().map(|&x| (self.p_min - x).max(0.0)).fold(0.0, f64::max);
        worst.max(floor_violation / self.p_sum)
    }
}

fn build(problem: &PaProblem, with_hinges: bool, weight_scale: f64) -> Separable {
    let q = problem.quantile();
    let coords = problem
        .targets
        .iter()
        .map(|target| {
            let offsets = if with_hinges {
                problem
                    .ego_discs
                    .iter()
                    .map(|ego| problem.d_safe - min_disc_distance(&target.discs, ego))
                    .collect()
            } else {
                Vec::new()
            };
            let slope = (q * target.crb.trace()).sqrt();
            Coordinate::new(offsets, slope, weight_scale * target.crb.trace(), target.comm_gain)
        })
        .collect();
    Separable { coords, p_sum: problem.p_sum, p_min: problem.p_min, r0: problem.r0_rate }
}

fn finish(
    problem: &PaProblem,
    sep: &Separable,
    objective: impl Fn(&[f64], &PaProblem) -> f64,
) -> Result<PowerAllocation> {
    problem.validate()?;
    let (powers, nu, eta) = sep.solve()?;
    let kkt_residual = sep.kkt_residual(&powers, nu, eta);
    Ok(PowerAllocation {
        objective: objective(&powers, problem),
        rate: problem.rate(&powers),
        kkt_residual,
        powers,
    })
}

/// Planning-oriented allocation: shrinkage cost plus CRB regularizer.
pub fn solve_pisac(problem: &PaProblem) -> Result<PowerAllocation> {
    let sep = build(problem, true, problem.rho);
    finish(problem, &sep, pisac_objective)
}

/// Minimizes the summed CRB trace under the same constraints.
pub fn solve_crb_min(problem: &PaProblem) -> Result<PowerAllocation> {
    let sep = build(problem, false, 1.0);
    finish(problem, &sep, crb_trace_sum)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::*;
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn toy(targets: Vec<PaTarget>, rho: f64, p_sum: f64, r0: f64) -> PaProblem {
        PaProblem::new(targets, ego_path(-5.0, 0.5, 21), 0.15, 0.05, rho, p_sum, r0).unwrap()
    }

    #[test]
    fn coordinate_matches_direct_objective() {
        let problem = toy(vec![target_at(2.2, 0.0, 40.0, 60.0, 1.0)], 0.3, 10.0, 0.0);
        let sep = build(&problem, true, problem.rho);
        for p in [0.01, 0.1, 1.0, 3.0, 9.0] {
            assert_relative_eq!(sep.coords[0].value(p), pisac_objective(&[p], &problem), max_relative = 1e-12);
        }
    }

    #[test]
    fn lone_active_beam_gets_full_budget() {
        let problem = toy(vec![target_at(2.2, 0.0, 40.0, 60.0, 1.0)], 0.0, 10.0, 0.0);
        assert!(shrinkage_cost(&[10.0], &problem) > 0.0);
        let sol = solve_pisac(&problem).unwrap();
        assert_relative_eq!(sol.powers[0], 10.0, max_relative = 1e-12);
        assert!(sol.kkt_residual < 1e-6);
    }

    #[test]
    fn symmetric_targets_split_equally() {
        let problem = toy(
            vec![target_at(2.3, 0.0, 30.0, 30.0, 1.0), target_at(-2.3, 0.0, 30.0, 30.0, 1.0)],
            0.05,
            10.0,
            0.0,
        );
        let sol = solve_pisac(&problem).unwrap();
        assert_relative_eq!(sol.powers[0], 5.0, max_relative = 1e-9);
        assert_relative_eq!(sol.powers[1], 5.0, max_relative = 1e-9);
        assert!(sol.kkt_residual < 1e-6, "kkt {}", sol.kkt_residual);
    }

    #[test]
    fn crb_min_square_root_rule() {
        let problem = toy(
            vec![target_at(20.0, 0.0, 0.5, 0.5, 1.0), target_at(-20.0, 0.0, 2.0, 2.0, 1.0)],
            0.0,
            3.0,
            0.0,
        );
        let sol = solve_crb_min(&problem).unwrap();
        assert_relative_eq!(sol.powers[0], 1.0, max_relative = 1e-9);
        assert_relative_eq!(sol.powers[1], 2.0, max_relative = 1e-9);
        assert!(sol.kkt_residual < 1e-6);

        let same = toy(vec![target_at(20.0, 0.0, 1.0, 1.0, 1.0), target_at(-20.0, 0.0, 1.0, 1.0, 3.0)], 0.0, 3.0, 0.0);
        let sol = solve_crb_min(&same).unwrap();
        assert_relative_eq!(sol.powers[0], sol.powers[1], max_relative = 1e-9);
    }

    #[test]
    fn rate_floor_binds() {
        // Pisac wants everything on the close target; the floor forces power
        // onto the strong-channel far target.
        let targets = vec![target_at(2.2, 0.0, 40.0, 40.0, 0.01), target_at(30.0, 0.0, 1.0, 1.0, 10.0)];
        let gains = [0.01, 10.0];
        let r0 = default_r0_rate(&gains, 10.0);
        let problem = toy(targets, 0.001, 10.0, r0);
        let sol = solve_pisac(&problem).unwrap();
        assert!(sol.rate >= r0 - 1e-9);
        assert!((sol.rate - r0).abs() < 1e-6, "rate {} vs floor {}", sol.rate, r0);
        assert!(sol.powers.iter().sum::<f64>() <= 10.0 + 1e-9);
        assert!(sol.kkt_residual < 1e-6, "kkt {}", sol.kkt_residual);
    }

    #[test]
    fn planning_priority() {
        let near = target_at(2.3, 0.0, 30.0, 30.0, 1.0);
        let far = target_at(25.0, 0.0, 30.0, 30.0, 1.0);
        let problem = toy(vec![near, far], 0.01, 10.0, 0.0);
        let pisac = solve_pisac(&problem).unwrap();
        assert!(shrinkage_cost(&pisac.powers, &problem) > 0.0 || shrinkage_cost(&[5.0, 5.0], &problem) > 0.0);
        assert!(pisac.powers[0] > pisac.powers[1]);
        let crb = solve_crb_min(&problem).unwrap();
        assert_relative_eq!(crb.powers[0], crb.powers[1], max_relative = 1e-9);
    }

    #[test]
    fn rho_sweep_is_monotone() {
        let targets = vec![
            target_at(2.3, 0.0, 30.0, 30.0, 1.0),
            target_at(-2.6, 3.0, 20.0, 50.0, 2.0),
            target_at(15.0, 1.0, 5.0, 5.0, 0.5),
        ];
        let mut last: Option<(f64, f64)> = None;
        for rho in [0.0, 1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0] {
            let problem = toy(targets.clone(), rho, 10.0, 0.0);
            let sol = solve_pisac(&problem).unwrap();
            let xi = shrinkage_cost(&sol.powers, &problem);
            let phi_unit = crb_trace_sum(&sol.powers, &problem);
            if let Some((xi_prev, phi_prev)) = last {
                assert!(xi >= xi_prev - 1e-9, "xi decreased at rho {rho}");
                assert!(phi_unit <= phi_prev + 1e-9, "phi increased at rho {rho}");
            }
            last = Some((xi, phi_unit));
        }
    }

    #[test]
    fn solution_on_a_kink_is_stationary() {
        // The third beam's optimum sits exactly where a hinge switches off.
        let targets = vec![
            target_at(0.0, -4.0, 31.67177447587911, 15.835887237939555, 0.01),
            target_at(0.0, 0.0, 28.421824810597272, 14.210912405298636, 0.01),
            target_at(-5.210971117854465, 4.0, 5.797360902394808, 2.898680451197404, 0.01),
        ];
        let sol = solve_pisac(&toy(targets, 0.37087120521874706, 10.0, 0.0)).unwrap();
        assert!(sol.kkt_residual < 1e-6, "kkt {}", sol.kkt_residual);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn solution_feasible_and_stationary(
            xs in proptest::collection::vec(-6.0f64..6.0, 3),
            traces in proptest::collection::vec(1.0f64..100.0, 3),
            gains in proptest::collection::vec(0.01f64..10.0, 3),
            rho in 0.0f64..0.5,
            frac in 0.0f64..1.0,
        ) {
            let targets: Vec<_> = (0..3)
                .map(|k| target_at(xs[k], 4.0 * k as f64 - 4.0, traces[k], traces[k] * 0.5, gains[k]))
                .collect();
            let r0 = frac * equal_split_rate(&gains, 10.0);
            let problem = toy(targets, rho, 10.0, r0);
            let sol = solve_pisac(&problem).unwrap();
            prop_assert!(problem.is_feasible(&sol.powers, 1e-9));
            prop_assert!(sol.kkt_residual < 1e-6, "kkt {}", sol.kkt_residual);
        }
    }
}

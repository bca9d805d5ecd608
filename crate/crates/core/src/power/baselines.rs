use std::f64::consts::LN_2;

use super::{PaProblem, PowerAllocation};
use crate::error::Result;
use crate::isac::sum_rate;

/// Water-filling with a per-channel floor: `p_k = max(mu - 1/g_k, p_min)`
/// with `sum p_k = p_sum`. Returns the powers and the water level `mu`.
pub fn water_fill(gains: &[f64], p_sum: f64, p_min: f64) -> (Vec<f64>, f64) {
    let k = gains.len();
    // Shifted levels turn the floor into an ordinary water-filling problem
    // with budget p_sum - K p_min.
    let mut levels: Vec<f64> = gains.iter().map(|g| 1.0 / g + p_min).collect();
    levels.sort_by(f64::total_cmp);
    let budget = p_sum - k as f64 * p_min;
    let mut acc = 0.0;
    let mut mu = levels[0] + budget;
    for m in 0..k {
        acc += levels[m];
        let cand = (budget + acc) / (m + 1) as f64;
        if m + 1 == k || cand <= levels[m + 1] {
            mu = cand;
            break;
        }
    }
    let powers = gains.iter().map(|g| (mu - 1.0 / g).max(p_min)).collect();
    (powers, mu)
}

/// Sum-rate maximization under the budget; the rate floor is not imposed
/// since this allocator maximizes the same quantity.
pub fn solve_srm(problem: &PaProblem) -> Result<PowerAllocation> {
    problem.validate()?;
    let gains = problem.gains();
    let (powers, mu) = water_fill(&gains, problem.p_sum, problem.p_min);
    let nu = 1.0 / (mu * LN_2);
    let mut residual: f64 = 0.0;
    for (&p, &g) in powers.iter().zip(&gains) {
        let d = g / ((1.0 + g * p) * LN_2);
        let gap = if p > problem.p_min * (1.0 + 1e-12) { (d - nu).abs() } else { (d - nu).max(0.0) };
        residual = residual.max(gap / nu);
    }
    let rate = sum_rate(&powers, &gains);
    residual = residual.max(((powers.iter().sum::<f64>() - problem.p_sum) / problem.p_sum).abs());
    Ok(PowerAllocation { powers, objective: rate, rate, kkt_residual: residual })
}

/// Max-min fairness: equalizes `g_k p_k` over the budget, with floored
/// channels pinned at `p_min`.
pub fn solve_mmf(problem: &PaProblem) -> Result<PowerAllocation> {
    problem.validate()?;
    let gains = problem.gains();
    let mut floored = vec![false; gains.len()];
    let mut powers = vec![problem.p_min; gains.len()];
    loop {
        let free_budget = problem.p_sum - problem.p_min * floored.iter().filter(|&&f| f).count() as f64;
        let inv: f64 = gains.iter().zip(&floored).filter(|(_, &f)| !f).map(|(g, _)| 1.0 / g).sum();
        let level = free_budget / inv;
        let mut changed = false;
        for (k, g) in gains.iter().enumerate() {
            if floored[k] {
                continue;
            }
            powers[k] = level / g;
            if powers[k] < problem.p_min {
                floored[k] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (k, f) in floored.iter().enumerate() {
            if *f {
                powers[k] = problem.p_min;
            }
        }
    }
    let snr: Vec<f64> = powers.iter().zip(&gains).zip(&floored).filter(|(_, &f)| !f).map(|((p, g), _)| p * g).collect();
    let spread = match (snr.iter().cloned().reduce(f64::max), snr.iter().cloned().reduce(f64::min)) {
        (Some(hi), Some(lo)) => (hi - lo) / hi,
        _ => 0.0,
    };
    let min_rate = powers.iter().zip(&gains).map(|(p, g)| (1.0 + g * p).log2()).fold(f64::INFINITY, f64::min);
    Ok(PowerAllocation { rate: sum_rate(&powers, &gains), powers, objective: min_rate, kkt_residual: spread })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use approx::assert_relative_eq;

    fn with_gains(gains: &[f64], p_sum: f64) -> PaProblem {
        let targets = gains.iter().enumerate().map(|(k, &g)| target_at(10.0 * k as f64 + 20.0, 0.0, 1.0, 1.0, g)).collect();
        PaProblem::new(targets, ego_path(0.0, 0.5, 3), 0.15, 0.05, 0.1, p_sum, 0.0).unwrap()
    }

    #[test]
    fn water_filling_examples() {
        let sol = solve_srm(&with_gains(&[1.0, 1.0], 2.0)).unwrap();
        assert_relative_eq!(sol.powers[0], 1.0, max_relative = 1e-9);
        assert_relative_eq!(sol.powers[1], 1.0, max_relative = 1e-9);

        let (p, mu) = water_fill(&[2.0, 1.0], 1.5, 0.0);
        assert_relative_eq!(mu, 1.5, max_relative = 1e-12);
        assert_relative_eq!(p[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(p[1], 0.5, max_relative = 1e-12);

        let sol = solve_srm(&with_gains(&[1.0, 1e-6], 1.0)).unwrap();
        assert!(sol.powers[0] > 0.999);
        assert_relative_eq!(sol.powers[1], 1e-6, max_relative = 1e-9);
        assert!(sol.kkt_residual < 1e-9);
    }

    #[test]
    fn srm_beats_perturbations() {
        let problem = with_gains(&[0.3, 2.0, 0.9, 5.0], 4.0);
        let sol = solve_srm(&problem).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let mut q = sol.powers.clone();
                let d = 0.05 * q[i].min(1.0);
                if q[i] - d < problem.p_min {
                    continue;
                }
                q[i] -= d;
                q[j] += d;
                assert!(problem.rate(&q) <= sol.rate + 1e-12);
            }
        }
    }

    #[test]
    fn mmf_equalizes() {
        let sol = solve_mmf(&with_gains(&[1.0, 2.0], 3.0)).unwrap();
        assert_relative_eq!(sol.powers[0], 2.0, max_relative = 1e-12);
        assert_relative_eq!(sol.powers[1], 1.0, max_relative = 1e-12);
        let sol = solve_mmf(&with_gains(&[3.0, 3.0, 3.0], 3.0)).unwrap();
        for p in &sol.powers {
            assert_relative_eq!(*p, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn mmf_is_locally_optimal() {
        let problem = with_gains(&[0.4, 1.7, 3.1], 6.0);
        let sol = solve_mmf(&problem).unwrap();
        let min_rate = |p: &[f64]| p.iter().zip(problem.gains()).map(|(p, g)| (1.0 + g * p).log2()).fold(f64::INFINITY, f64::min);
        for i in 0..3 {
            for j in 0..3 {
                for scale in [0.9, 1.1] {
                    let mut q = sol.powers.clone();
                    let delta = q[i] * (scale - 1.0);
                    q[i] += delta;
                    q[j] -= delta;
                    if i != j && q.iter().all(|&x| x >= problem.p_min) {
                        assert!(min_rate(&q) <= sol.objective + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn mmf_respects_floor() {
        let problem = with_gains(&[1.0, 1e-12], 1.0);
        let sol = solve_mmf(&problem).unwrap();
        assert!(sol.powers.iter().all(|&p| p >= problem.p_min));
        assert!(sol.powers.iter().sum::<f64>() <= 1.0 + 1e-9);
    }
}

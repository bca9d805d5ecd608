use super::{pisac_objective, PaProblem, PowerAllocation};
use crate::error::{PisacError, Result};

/// Exhaustive search of the planning objective over the budget face.
pub fn grid_oracle(problem: &PaProblem, resolution: usize) -> Result<PowerAllocation> {
    grid_oracle_with(problem, resolution, pisac_objective)
}

/// Brute-force minimization of `objective` over the grid
/// `p_k = p_min + (p_sum - K p_min) i_k / n` with `sum i_k = n`.
/// Every objective in this module is nonincreasing in each power, so the
/// budget face contains an optimum.
pub fn grid_oracle_with(
    problem: &PaProblem,
    resolution: usize,
    objective: impl Fn(&[f64], &PaProblem) -> f64,
) -> Result<PowerAllocation> {
    let k = problem.len();
    if k == 0 || k > 4 {
        return Err(PisacError::Unsupported(format!("grid oracle handles 1..=4 beams, got {k}")));
    }
    if resolution == 0 {
        return Err(PisacError::Config("grid resolution must be positive".into()));
    }
    let n = resolution;
    let span = problem.p_sum - k as f64 * problem.p_min;
    let mut idx = vec![0usize; k];
    let mut best: Option<(f64, Vec<f64>)> = None;
    loop {
        let used: usize = idx[..k - 1].iter().sum();
        if used <= n {
            idx[k - 1] = n - used;
            let powers: Vec<f64> = idx.iter().map(|&i| problem.p_min + span * i as f64 / n as f64).collect();
            if problem.rate(&powers) >= problem.r0_rate - 1e-9 {
                let value = objective(&powers, problem);
                if best.as_ref().map_or(true, |(b, _)| value < *b) {
                    best = Some((value, powers));
                }
            }
        }
        // Odometer over the first K-1 indices.
        let mut pos = 0;
        loop {
            if pos + 1 >= k {
                let (objective, powers) = best.ok_or_else(|| PisacError::Infeasible {
                    binding: "sum-rate".into(),
                    detail: "no grid point meets the rate floor".into(),
                })?;
                return Ok(PowerAllocation { rate: problem.rate(&powers), powers, objective, kkt_residual: f64::NAN });
            }
            idx[pos] += 1;
            if idx[..k - 1].iter().sum::<usize>() <= n {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

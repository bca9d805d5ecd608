//! Oracle checks for the estimation, uncertainty, allocation and distance
//! building blocks. Shared by the `validate` subcommand and the acceptance
//! test target; every check is seeded and reports a one-line summary.

use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::geometry::{
    dca_decompose, polytope_distance, rect_distance, rect_to_polytope, rotation, DiscPair, HalfspacePolytope,
    OrientedRect, Pose2, Vec2,
};
use crate::isac::{crb_matrix, mle_samples, polar_from_cartesian, sensing_covariance, CrbModel, RsuConfig, SensingCovariance};
use crate::planner::dual_distance;
use crate::power::{
    equal_split_rate, grid_oracle, solve_crb_min, solve_mmf, solve_pisac, solve_srm, PaProblem, PaTarget,
};
use crate::uncertainty::{confidence_ellipse, inflate_obstacle};

/// Vehicle footprint used by the synthetic problems.
const CAR_LENGTH: f64 = 4.694;
const CAR_WIDTH: f64 = 1.849;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, chol: &Matrix2<f64>) -> Vec2 {
    chol * Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Per-coordinate MSE of the single-target estimator against the CRB
/// diagonal at `snr_db`. The lower bound of the accepted band is widened
/// by three Monte-Carlo standard errors, since an efficient estimator sits
/// exactly at ratio one.
pub fn crb_efficiency(target: Vec2, snr_db: f64, draws: usize, seed: u64) -> Result<Check> {
    let start = Instant::now();
    let rsu = RsuConfig::default();
    let p = rsu.power_budget(snr_db);
    let polar = polar_from_cartesian(&target, &rsu)?;
    let crb = crb_matrix(&polar, &rsu, 1.0)?.at_power(p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = mle_samples(&polar, p, &rsu, draws, &mut rng)?;
    let n = draws as f64;
    let mut passed = true;
    let mut parts = Vec::new();
    for (axis, label) in ["x", "y"].iter().enumerate() {
        let sq: Vec<f64> = samples.iter().map(|s| (s[axis] - target[axis]).powi(2)).collect();
        let mse = sq.iter().sum::<f64>() / n;
        let var = sq.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (n - 1.0);
        let bound = crb[(axis, axis)];
        let ratio = mse / bound;
        let se = (var / n).sqrt() / bound;
        passed &= ratio >= 1.0 - 3.0 * se && ratio <= 1.3;
        parts.push(format!("{label}: mse/crb {ratio:.4} (se {se:.4})"));
    }
    let elapsed = start.elapsed().as_secs_f64();
    passed &= elapsed < 60.0;
    Ok(Check::new("crb_efficiency", passed, format!("{}, {draws} draws in {elapsed:.2} s", parts.join(", "))))
}

fn random_covariance(rng: &mut ChaCha8Rng) -> Matrix2<f64> {
    let a = rng.gen_range(0.01..4.0);
    let b = rng.gen_range(0.01..4.0);
    let r = rotation(rng.gen_range(-3.2..3.2));
    let m = r * Matrix2::new(a, 0.0, 0.0, b) * r.transpose();
    (m + m.transpose()) * 0.5
}

/// Empirical coverage of the `1 - eps` confidence ellipse over random
/// means and full covariances. Passes when every pair is within `tol`.
pub fn ellipse_containment(pairs: usize, samples: usize, risk_eps: f64, tol: f64, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..pairs {
        let mean = Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
        let sigma = random_covariance(&mut rng);
        let ellipse = confidence_ellipse(mean, &SensingCovariance { sigma }, risk_eps)?;
        let chol = sigma.cholesky().expect("covariance is positive definite").l();
        let inside = (0..samples).filter(|_| ellipse.contains(&(mean + gaussian(&mut rng, &chol)))).count();
        let frac = inside as f64 / samples as f64;
        lo = lo.min(frac);
        hi = hi.max(frac);
    }
    let target = 1.0 - risk_eps;
    let passed = (lo - target).abs() <= tol && (hi - target).abs() <= tol;
    Ok(Check::new("ellipse_containment", passed, format!("coverage in [{lo:.4}, {hi:.4}], target {target} +/- {tol}")))
}

/// Moves `rect` along `dir` from `from` until its distance to `obstacle`
/// is `d` (to within 1e-12), staying on the far side.
fn place_at_distance(obstacle: &OrientedRect, from: Pose2, dir: Vec2, d: f64) -> Result<OrientedRect> {
    let at = |s: f64| OrientedRect::from_extents(from.with_position(from.position() + dir * s), CAR_LENGTH, CAR_WIDTH);
    let (mut near, mut far) = (0.0, 1.0);
    while rect_distance(&at(far)?, obstacle) < d {
        far *= 2.0;
    }
    while far - near > 1e-12 {
        let mid = 0.5 * (near + far);
        if rect_distance(&at(mid)?, obstacle) < d {
            near = mid;
        } else {
            far = mid;
        }
    }
    at(far)
}

/// Probability that the true obstacle comes within `d_safe` of an ego
/// vehicle that keeps exactly `d_safe` from the inflated estimate. The true
/// centre is drawn from the sensing distribution around the estimate.
pub fn inflation_sufficiency(configs: usize, draws: usize, risk_eps: f64, d_safe: f64, seed: u64) -> Result<Check> {
    let rsu = RsuConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let estimate = Pose2::new(rng.gen_range(395.0..425.0), rng.gen_range(20.0..110.0), rng.gen_range(-3.2..3.2));
        let crb = crb_matrix(&polar_from_cartesian(&estimate.position(), &rsu)?, &rsu, 1.0)?;
        let p = rsu.power_budget(rng.gen_range(25.0..40.0)) * rng.gen_range(0.05..1.0);
        let nominal = OrientedRect::from_extents(estimate, CAR_LENGTH, CAR_WIDTH)?;
        let inflated = inflate_obstacle(&nominal, &crb, p, risk_eps)?;
        let bearing = rng.gen_range(-3.2..3.2);
        let ev_pose = Pose2::new(estimate.x, estimate.y, rng.gen_range(-3.2..3.2));
        let ev = place_at_distance(&inflated.rect, ev_pose, Vec2::new(f64::cos(bearing), f64::sin(bearing)), d_safe)?;
        let sigma = sensing_covariance(&crb, p)?.sigma;
        let chol = sigma.cholesky().expect("covariance is positive definite").l();
        let mut hits = 0usize;
        for _ in 0..draws {
            let truth = nominal.moved_to(estimate.with_position(estimate.position() + gaussian(&mut rng, &chol)));
            if rect_distance(&ev, &truth) <= d_safe {
                hits += 1;
            }
        }
        worst = worst.max(hits as f64 / draws as f64);
    }
    let bound = risk_eps + 0.01;
    Ok(Check::new(
        "inflation_sufficiency",
        worst <= bound,
        format!("worst violation probability {worst:.4} over {configs} configs, bound {bound:.3}"),
    ))
}

fn synthetic_target(x: f64, y: f64, c11: f64, c22: f64, gain: f64) -> PaTarget {
    let rect = OrientedRect::from_extents(Pose2::new(x, y, FRAC_PI_2), CAR_LENGTH, CAR_WIDTH).expect("valid extents");
    PaTarget { crb: CrbModel::from_matrix(Matrix2::new(c11, 0.0, 0.0, c22)), discs: dca_decompose(&rect), comm_gain: gain }
}

fn synthetic_path(y0: f64, step: f64, n: usize) -> Vec<DiscPair> {
    (0..n)
        .map(|t| {
            let pose = Pose2::new(0.0, y0 + step * t as f64, FRAC_PI_2);
            dca_decompose(&OrientedRect::from_extents(pose, CAR_LENGTH, CAR_WIDTH).expect("valid extents"))
        })
        .collect()
}

/// Three obstacles spread along a straight ego path, random CRBs and gains,
/// and a rate floor anywhere between zero and 90 % of the equal split.
pub fn random_pa_problem(rng: &mut ChaCha8Rng, k: usize) -> Result<PaProblem> {
    let targets: Vec<PaTarget> = (0..k)
        .map(|i| {
            synthetic_target(
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-6.0..6.0) + 4.0 * i as f64 - 4.0,
                rng.gen_range(5.0..80.0),
                rng.gen_range(5.0..80.0),
                rng.gen_range(0.05..5.0),
            )
        })
        .collect();
    let gains: Vec<f64> = targets.iter().map(|t| t.comm_gain).collect();
    let r0 = rng.gen_range(0.0..0.9) * equal_split_rate(&gains, 10.0);
    PaProblem::new(targets, synthetic_path(-5.0, 0.5, 21), 0.15, 0.05, rng.gen_range(0.0..0.05), 10.0, r0)
}

/// Water-filling by bisection on the water level.
fn water_fill_bisection(gains: &[f64], p_sum: f64, p_min: f64) -> Vec<f64> {
    let total = |mu: f64| gains.iter().map(|g| (mu - 1.0 / g).max(p_min)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, p_sum + gains.iter().map(|g| 1.0 / g).fold(0.0, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < p_sum {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    gains.iter().map(|g| (0.5 * (lo + hi) - 1.0 / g).max(p_min)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Allocator checks on random three-obstacle problems: grid agreement,
/// stationarity, feasibility and the closed forms of the baselines.
pub fn power_allocation(problems: usize, grid_resolution: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut grid_gap, mut kkt, mut violation): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let (mut srm_err, mut mmf_err, mut crb_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..problems {
        let problem = random_pa_problem(&mut rng, 3)?;
        let sol = solve_pisac(&problem)?;
        let grid = grid_oracle(&problem, grid_resolution)?;
        grid_gap = grid_gap.max((sol.objective - grid.objective) / grid.objective.abs().max(1e-9));
        kkt = kkt.max(sol.kkt_residual);
        let sum: f64 = sol.powers.iter().sum();
        let floor = sol.powers.iter().map(|p| problem.p_min - p).fold(f64::NEG_INFINITY, f64::max);
        violation = violation.max(sum - problem.p_sum).max(floor).max(problem.r0_rate - problem.rate(&sol.powers));

        let gains = problem.gains();
        let srm = solve_srm(&problem)?;
        srm_err = srm_err.max(max_abs_diff(&srm.powers, &water_fill_bisection(&gains, problem.p_sum, problem.p_min)));

        let inv: f64 = gains.iter().map(|g| 1.0 / g).sum();
        let mmf_closed: Vec<f64> = gains.iter().map(|g| problem.p_sum / (g * inv)).collect();
        if mmf_closed.iter().all(|&p| p > problem.p_min) {
            mmf_err = mmf_err.max(max_abs_diff(&solve_mmf(&problem)?.powers, &mmf_closed));
        }

        let mut slack = problem.clone();
        slack.r0_rate = 0.0;
        let roots: Vec<f64> = slack.targets.iter().map(|t| t.crb.trace().sqrt()).collect();
        let root_sum: f64 = roots.iter().sum();
        let crb_closed: Vec<f64> = roots.iter().map(|r| slack.p_sum * r / root_sum).collect();
        crb_err = crb_err.max(max_abs_diff(&solve_crb_min(&slack)?.powers, &crb_closed));
    }
    Ok(vec![
        Check::new("pa_grid_agreement", grid_gap <= 1e-3, format!("max relative gap to grid {grid_gap:.3e}")),
        Check::new("pa_kkt", kkt < 1e-6, format!("max KKT residual {kkt:.3e}")),
        Check::new("pa_feasibility", violation <= 1e-9, format!("max constraint violation {violation:.3e}")),
        Check::new("srm_water_filling", srm_err <= 1e-9, format!("max power error {srm_err:.3e}")),
        Check::new("mmf_closed_form", mmf_err <= 1e-9, format!("max power error {mmf_err:.3e}")),
        Check::new("crb_min_closed_form", crb_err <= 1e-6, format!("max power error {crb_err:.3e}")),
    ])
}

fn body_polytope(half_length: f64, half_width: f64) -> Result<HalfspacePolytope> {
    rect_to_polytope(&OrientedRect::new(Pose2::new(0.0, 0.0, 0.0), half_length, half_width)?)
}

/// Dual distance against the primal polytope distance on random disjoint
/// rectangle pairs.
pub fn dual_distance_agreement(pairs: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut worst): (usize, f64) = (0, 0.0);
    while checked < pairs {
        let (hl, hw) = (rng.gen_range(0.3..3.0), rng.gen_range(0.2..1.5));
        let shape = body_polytope(hl, hw)?;
        let pose = Pose2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-3.2..3.2));
        let obstacle = rect_to_polytope(&OrientedRect::new(
            Pose2::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-3.2..3.2)),
            rng.gen_range(0.3..3.0),
            rng.gen_range(0.2..1.5),
        )?)?;
        let ev = rect_to_polytope(&OrientedRect::new(pose, hl, hw)?)?;
        let primal = polytope_distance(&ev, &obstacle);
        if primal <= 1e-6 {
            continue;
        }
        let cert = dual_distance(&pose, &obstacle, &shape);
        let err = (cert.distance - primal)
            .abs()
            .max((cert.objective(&pose, &obstacle, &shape) - primal).abs())
            .max(cert.feasibility_residual(&pose, &obstacle, &shape));
        worst = worst.max(err);
        checked += 1;
    }
    Ok(Check::new("dual_distance", worst < 1e-6, format!("max error {worst:.3e} over {pairs} pairs")))
}

/// Problem sizes for [`run_all`].
#[derive(Debug, Clone, Copy)]
pub struct ValidateSizes {
    pub mle_draws: usize,
    pub ellipse_pairs: usize,
    pub ellipse_samples: usize,
    pub inflation_configs: usize,
    pub inflation_draws: usize,
    pub pa_problems: usize,
    pub dual_pairs: usize,
}

impl ValidateSizes {
    pub const FULL: Self = Self {
        mle_draws: 10_000,
        ellipse_pairs: 20,
        ellipse_samples: 100_000,
        inflation_configs: 20,
        inflation_draws: 100_000,
        pa_problems: 20,
        dual_pairs: 100,
    };
}

/// Ego start of the default scenario, where the estimator is checked.
pub const EFFICIENCY_TARGET: [f64; 2] = [409.2, 28.0];

pub fn run_all(sizes: &ValidateSizes, seed: u64) -> Result<Vec<Check>> {
    let mut checks = vec![
        crb_efficiency(Vec2::from(EFFICIENCY_TARGET), 38.0, sizes.mle_draws, seed)?,
        ellipse_containment(sizes.ellipse_pairs, sizes.ellipse_samples, 0.05, 0.005, seed)?,
        inflation_sufficiency(sizes.inflation_configs, sizes.inflation_draws, 0.05, 0.15, seed)?,
    ];
    checks.extend(power_allocation(sizes.pa_problems, 200, seed)?);
    checks.push(dual_distance_agreement(sizes.dual_pairs, seed)?);
    Ok(checks)
}

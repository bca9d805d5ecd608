use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Method, ScenarioConfig};
use super::metrics::{compute_metrics, Metrics};
use crate::error::{PisacError, Result};
use crate::geometry::{dca_decompose, rect_distance, OrientedRect, Pose2, Vec2};
use crate::isac::{
    cartesian_from_polar, comm_gain, crb_matrix, draw_measurement, linearized_mle, polar_from_cartesian, sum_rate,
    CrbModel,
};
use crate::planner::{plan_with_restarts, sample_reference, Control, PlanResult, WarmStart};
use crate::power::{
    default_rho, equal_split_rate, solve_crb_min, solve_mmf, solve_pisac, solve_srm, PaProblem, PaTarget,
    PowerAllocation,
};
use crate::uncertainty::inflate_obstacle;

/// How a step (and, for the last one, the episode) ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Running,
    Goal,
    Collision,
    Timeout,
    Stuck,
    PlannerFailure,
}

/// Per-obstacle record of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleLog {
    pub true_position: [f64; 2],
    pub estimate: [f64; 2],
    /// Trace of the unit-power CRB at the estimate.
    pub crb_unit_trace: f64,
    /// Power that produced this step's estimate.
    pub measure_power: f64,
    /// Power allocated this step (used for the next measurement).
    pub power: f64,
    /// Half-length and half-width of the planning footprint.
    pub planning_half_extents: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub converged: bool,
    pub iterations: usize,
    pub tracking_cost: f64,
    /// `None` when no obstacle constrains the horizon.
    pub min_clearance: Option<f64>,
    pub replay_error: f64,
    pub control_violation: f64,
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Time after the step was applied.
    pub time: f64,
    /// Ego pose after the step.
    pub ev_pose: [f64; 3],
    /// Applied `[speed, steering]`.
    pub control: [f64; 2],
    pub obstacles: Vec<ObstacleLog>,
    pub sum_rate: f64,
    /// `sum_k tr(C_k) / p_k` at the allocated powers.
    pub crb_trace: f64,
    pub alloc_kkt_residual: f64,
    pub plan: Option<PlanSummary>,
    /// Smallest true clearance to any obstacle after the step.
    pub true_clearance: f64,
    /// The plan was unsafe and the ego braked instead.
    pub braked: bool,
    pub status: StepStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything kept from one planning step when plans are retained.
#[derive(Debug, Clone)]
pub struct PlanRecord {
    pub plan: PlanResult,
    pub obstacles: Vec<OrientedRect>,
    pub u_prev: Control,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub metrics: Metrics,
    pub log: Vec<StepLog>,
    /// Filled when [`EpisodeOptions::keep_plans`] is set.
    pub plans: Vec<PlanRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EpisodeOptions {
    pub keep_plans: bool,
}

fn pose_array(p: &Pose2) -> [f64; 3] {
    [p.x, p.y, p.theta]
}

/// Runs one closed-loop episode with the method, seed and SNR from `config`.
pub fn run_episode(config: &ScenarioConfig) -> Result<Episode> {
    run_episode_with(config, EpisodeOptions::default())
}

/// Scripted-obstacle episode. Each step measures every obstacle with the
/// previous step's powers, estimates its position, allocates new powers,
/// plans against the (inflated) estimates and applies the first control.
/// Allocation infeasibility is returned as an error; estimation and
/// planning failures end the episode with `planner_failure`.
pub fn run_episode_with(config: &ScenarioConfig, options: EpisodeOptions) -> Result<Episode> {
    config.validate()?;
    let method = config.isac.method;
    let rsu = &config.rsu;
    let dynamics = &config.planner.dynamics;
    let d_safe = config.planner.d_safe;
    let risk_eps = config.isac.risk_eps;
    let dt = dynamics.dt;
    let k_count = config.obstacles.len();
    let p_sum = rsu.power_budget(config.isac.snr_db);
    let planner_cfg = config.planner_config();
    let goal = config.ego.goal_pose();
    let ev_shape = OrientedRect::from_extents(Pose2::new(0.0, 0.0, 0.0), config.ego.length, config.ego.width)?;
    let max_steps = (config.max_sim_time / dt - 1e-9).ceil().max(1.0) as usize;
    let stuck_steps = (config.planner.stuck_window / dt).round().max(1.0) as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ev = config.ego.start_pose();
    let mut u_prev = Control::new(config.ego.initial_speed, 0.0);
    let mut guess: Option<Vec<Control>> = None;
    let mut powers = vec![p_sum / k_count as f64; k_count];
    let mut estimates: Vec<Vec2> = config.obstacles.iter().map(|o| Vec2::new(o.pose[0], o.pose[1])).collect();
    let mut history: VecDeque<Vec2> = VecDeque::from([ev.position()]);
    let mut log = Vec::new();
    let mut plans = Vec::new();

    for step in 0..max_steps {
        let t_now = step as f64 * dt;
        let truth: Vec<OrientedRect> = config.obstacles.iter().map(|o| o.rect_at(t_now)).collect::<Result<_>>()?;
        let measure_powers = powers.clone();

        // Measurement and estimation, predicted forward for moving obstacles.
        let mut failure: Option<PisacError> = None;
        for (k, ob) in config.obstacles.iter().enumerate() {
            let [vx, vy] = ob.velocity.unwrap_or([0.0, 0.0]);
            if step > 0 {
                estimates[k] += Vec2::new(vx, vy) * dt;
            }
            match estimate(&truth[k].center.position(), &estimates[k], measure_powers[k], config, &mut rng) {
                Ok(e) => estimates[k] = e,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }

        let mut record = StepLog {
            step,
            time: t_now + dt,
            ev_pose: pose_array(&ev),
            control: [u_prev[0], u_prev[1]],
            obstacles: Vec::new(),
            sum_rate: f64::NAN,
            crb_trace: f64::NAN,
            alloc_kkt_residual: f64::NAN,
            plan: None,
            true_clearance: f64::NAN,
            braked: false,
            status: StepStatus::PlannerFailure,
            error: None,
        };
        if let Some(e) = failure {
            record.error = Some(e.to_string());
            log.push(record);
            break;
        }

        let est_rects: Vec<OrientedRect> = config
            .obstacles
            .iter()
            .zip(&estimates)
            .map(|(o, e)| OrientedRect::from_extents(Pose2::new(e.x, e.y, o.pose[2]), o.length, o.width))
            .collect::<Result<_>>()?;
        let crbs: Vec<CrbModel> = match estimates
            .iter()
            .map(|e| polar_from_cartesian(e, rsu).and_then(|w| crb_matrix(&w, rsu, 1.0)))
            .collect::<Result<_>>()
        {
            Ok(c) => c,
            Err(e) => {
                record.error = Some(e.to_string());
                log.push(record);
                break;
            }
        };

        let reference = sample_reference(&ev, &goal, config.ego.ref_speed, dynamics, config.planner.horizon)?;
        let allocation = allocate(config, method, &reference.waypoints, &ev_shape, &est_rects, &crbs, &estimates, p_sum)?;
        powers = allocation.powers.clone();
        let gains: Vec<f64> = estimates
            .iter()
            .map(|e| polar_from_cartesian(e, rsu).map(|w| comm_gain(&w, rsu, 1.0)))
            .collect::<Result<_>>()?;
        record.sum_rate = sum_rate(&powers, &gains);
        record.crb_trace = crbs.iter().zip(&powers).map(|(c, p)| c.trace() / p).sum();
        record.alloc_kkt_residual = allocation.kkt_residual;

        let planning: Vec<OrientedRect> = if method == Method::Rda {
            est_rects.clone()
        } else {
            est_rects
                .iter()
                .zip(&crbs)
                .zip(&measure_powers)
                .map(|((r, c), &p)| inflate_obstacle(r, c, p, risk_eps).map(|o| o.rect))
                .collect::<Result<_>>()?
        };
        record.obstacles = (0..k_count)
            .map(|k| ObstacleLog {
                true_position: [truth[k].center.x, truth[k].center.y],
                estimate: [estimates[k].x, estimates[k].y],
                crb_unit_trace: crbs[k].trace(),
                measure_power: measure_powers[k],
                power: powers[k],
                planning_half_extents: [planning[k].half_length, planning[k].half_width],
            })
            .collect();

        let warm = WarmStart { start: Some(ev), u_prev: Some(u_prev), guess: guess.take() };
        let plan = match plan_with_restarts(&reference, &planning, dynamics, d_safe, &planner_cfg, &warm) {
            Ok(p) => p,
            Err(e) => {
                record.error = Some(e.to_string());
                log.push(record);
                break;
            }
        };
        record.plan = Some(PlanSummary {
            converged: plan.converged,
            iterations: plan.iterations,
            tracking_cost: plan.tracking_cost,
            min_clearance: plan.min_clearance.is_finite().then_some(plan.min_clearance),
            replay_error: plan.replay_error(),
            control_violation: dynamics.control_violation(&plan.controls, Some(&u_prev)),
        });

        let unsafe_plan = !plan.converged && !(plan.min_clearance >= d_safe - 1e-3);
        let u0 = if unsafe_plan && config.planner.brake_on_infeasible {
            record.braked = true;
            let speed = (u_prev[0] + dynamics.a_min[0]).max(dynamics.u_min[0]);
            Control::new(speed, plan.controls[0][1])
        } else {
            plan.controls[0]
        };
        let mut shifted: Vec<Control> = plan.controls[1..].to_vec();
        shifted.push(*plan.controls.last().expect("nonempty horizon"));
        guess = Some(shifted);
        if options.keep_plans {
            plans.push(PlanRecord { plan, obstacles: planning, u_prev });
        }

        ev = dynamics.step_pose(&ev, &u0);
        u_prev = u0;
        record.ev_pose = pose_array(&ev);
        record.control = [u0[0], u0[1]];

        let t_next = t_now + dt;
        let ev_rect = ev_shape.moved_to(ev);
        let mut clearance = f64::INFINITY;
        for ob in &config.obstacles {
            clearance = clearance.min(rect_distance(&ev_rect, &ob.rect_at(t_next)?));
        }
        record.true_clearance = clearance;

        history.push_back(ev.position());
        if history.len() > stuck_steps + 1 {
            history.pop_front();
        }
        record.status = if clearance <= 0.0 {
            StepStatus::Collision
        } else if (ev.position() - goal.position()).norm() <= config.ego.goal_tolerance {
            StepStatus::Goal
        } else if history.len() == stuck_steps + 1
            && (history[stuck_steps] - history[0]).norm() < config.planner.stuck_distance
        {
            StepStatus::Stuck
        } else if step + 1 == max_steps {
            StepStatus::Timeout
        } else {
            StepStatus::Running
        };
        let done = record.status != StepStatus::Running;
        log.push(record);
        if done {
            break;
        }
    }

    let metrics = compute_metrics(&log, config);
    Ok(Episode { metrics, log, plans })
}

/// Gauss-Newton position estimate from one noisy snapshot, started at `prior`.
fn estimate(truth: &Vec2, prior: &Vec2, p: f64, config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec2> {
    let rsu = &config.rsu;
    let w_true = polar_from_cartesian(truth, rsu)?;
    let r = draw_measurement(&w_true, p, rsu, 1.0, 1.0, rng)?;
    let mut w = polar_from_cartesian(prior, rsu)?;
    for _ in 0..config.isac.estimator_iters {
        w = linearized_mle(&r, &w, p, rsu, 1.0)?;
    }
    Ok(cartesian_from_polar(&w, rsu))
}

#[allow(clippy::too_many_arguments)]
fn allocate(
    config: &ScenarioConfig,
    method: Method,
    waypoints: &[Pose2],
    ev_shape: &OrientedRect,
    est_rects: &[OrientedRect],
    crbs: &[CrbModel],
    estimates: &[Vec2],
    p_sum: f64,
) -> Result<PowerAllocation> {
    let rsu = &config.rsu;
    let targets: Vec<PaTarget> = est_rects
        .iter()
        .zip(crbs)
        .zip(estimates)
        .map(|((r, c), e)| {
            Ok(PaTarget { crb: *c, discs: dca_decompose(r), comm_gain: comm_gain(&polar_from_cartesian(e, rsu)?, rsu, 1.0) })
        })
        .collect::<Result<_>>()?;
    let ego_discs = waypoints.iter().map(|w| dca_decompose(&ev_shape.moved_to(*w))).collect();
    let gains: Vec<f64> = targets.iter().map(|t| t.comm_gain).collect();
    let rho = config.isac.rho.unwrap_or_else(|| config.isac.rho_scale * default_rho(config.planner.d_safe, p_sum, crbs));
    let r0 = config.isac.r0_rate.unwrap_or_else(|| config.isac.r0_fraction * equal_split_rate(&gains, p_sum));
    let problem = PaProblem::new(targets, ego_discs, config.planner.d_safe, config.isac.risk_eps, rho, p_sum, r0)?;
    match method {
        Method::Pisac | Method::Rda => solve_pisac(&problem),
        Method::Isac => solve_crb_min(&problem),
        Method::Srm => solve_srm(&problem),
        Method::Mmf => solve_mmf(&problem),
    }
}

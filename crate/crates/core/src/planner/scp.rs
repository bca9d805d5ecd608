//! Alternating solve of the dual-reformulated planning problem.
//!
//! Each iteration (i) fixes the trajectory and computes the optimal dual
//! certificate of every nearby (obstacle, step) pair, then (ii) fixes the
//! duals and solves a QP in the control increments. With `lambda` fixed,
//! the `mu` block is eliminated by LP duality, which leaves one linear
//! constraint per ego vertex: `w . (p_t + R(theta_t) z_v) >= lambda^T b +
//! d_safe`, linearized in heading. Steps are accepted only if the merit
//! (tracking cost plus penalized clearance violation) does not increase.

use nalgebra::{DMatrix, DVector, Matrix2, Vector3};

use super::dual::{dual_distance, signed_separation};
use super::dynamics::{linearize_vec, Control, DynamicsModel, LinearStep};
use super::qp::{QpProblem, QpSettings, SparseRow};
use super::{DualVars, PlanResult, PlannerConfig, ReferencePath, WarmStart};
use crate::error::{PisacError, Result};
use crate::geometry::{
    normalize_angle, polygons_intersect, rect_distance, rect_to_polytope, rotation, HalfspacePolytope, OrientedRect,
    Pose2, Vec2,
};
use crate::uncertainty::InflatedObstacle;

struct Obstacle {
    rect: OrientedRect,
    poly: HalfspacePolytope,
    vertices: [Vec2; 4],
    normals: [Vec2; 2],
    radius: f64,
}

struct Context<'a> {
    reference: &'a ReferencePath,
    dynamics: &'a DynamicsModel,
    cfg: &'a PlannerConfig,
    d_safe: f64,
    obstacles: Vec<Obstacle>,
    ev_body: [Vec2; 4],
    ev_radius: f64,
    ev_shape: HalfspacePolytope,
    u_prev: Option<Control>,
}

fn pose_of(s: &Vector3<f64>) -> Pose2 {
    Pose2::new(s[0], s[1], s[2])
}

impl Context<'_> {
    fn horizon(&self) -> usize {
        self.reference.horizon()
    }

    fn ev_vertices(&self, s: &Vector3<f64>) -> [Vec2; 4] {
        let r = rotation(s[2]);
        let p = Vec2::new(s[0], s[1]);
        self.ev_body.map(|z| r * z + p)
    }

    fn tracking_cost(&self, states: &[Vector3<f64>]) -> f64 {
        states
            .iter()
            .zip(&self.reference.waypoints)
            .map(|(s, w)| {
                let dth = normalize_angle(s[2] - w.theta);
                (s[0] - w.x).powi(2) + (s[1] - w.y).powi(2) + self.cfg.heading_weight * dth * dth
            })
            .sum()
    }

    /// Signed separation and direction for pair (k, state) when the pair is
    /// within `d_safe + margin`, else `None`.
    fn separation(&self, k: usize, s: &Vector3<f64>, margin: f64) -> Option<(f64, Vec2)> {
        let ob = &self.obstacles[k];
        let centre_gap = (Vec2::new(s[0], s[1]) - ob.rect.center.position()).norm() - self.ev_radius - ob.radius;
        if centre_gap >= self.d_safe + margin {
            return None;
        }
        let r = rotation(s[2]);
        let normals = [ob.normals[0], ob.normals[1], r * Vec2::new(1.0, 0.0), r * Vec2::new(0.0, 1.0)];
        let (value, w) = signed_separation(&self.ev_vertices(s), &ob.vertices, &normals);
        (value < self.d_safe + margin).then_some((value, w))
    }

    /// Sum over steps of the worst clearance shortfall, matching the one
    /// slack per step used in the QP.
    fn violation(&self, states: &[Vector3<f64>]) -> f64 {
        let mut total = 0.0;
        for s in &states[1..] {
            let mut worst: f64 = 0.0;
            for k in 0..self.obstacles.len() {
                if let Some((value, _)) = self.separation(k, s, 0.0) {
                    worst = worst.max(self.d_safe - value);
                }
            }
            total += worst;
        }
        total
    }

    fn merit(&self, states: &[Vector3<f64>]) -> f64 {
        self.tracking_cost(states) + self.cfg.slack_penalty * self.violation(states)
    }

    fn linearize(&self, states: &[Vector3<f64>], controls: &[Control]) -> Result<Vec<LinearStep>> {
        controls.iter().enumerate().map(|(t, u)| linearize_vec(&states[t], u, self.dynamics)).collect()
    }

    /// Sensitivity of state `t` to the control increments, `3(H+1) x 2H`.
    fn sensitivities(&self, lin: &[LinearStep]) -> DMatrix<f64> {
        let h = self.horizon();
        let mut phi = DMatrix::zeros(3 * (h + 1), 2 * h);
        for t in 0..h {
            for j in 0..2 * t {
                for r in 0..3 {
                    let mut acc = 0.0;
                    for q in 0..3 {
                        acc += lin[t].a[(r, q)] * phi[(3 * t + q, j)];
                    }
                    phi[(3 * (t + 1) + r, j)] = acc;
                }
            }
            for r in 0..3 {
                for c in 0..2 {
                    phi[(3 * (t + 1) + r, 2 * t + c)] = lin[t].b[(r, c)];
                }
            }
        }
        phi
    }

    fn build_qp(&self, states: &[Vector3<f64>], controls: &[Control], phi: &DMatrix<f64>, trust: f64) -> (QpProblem, usize) {
        let h = self.horizon();
        let nu = 2 * h;
        let mut pairs = Vec::new();
        for t in 1..=h {
            for k in 0..self.obstacles.len() {
                if let Some((_, w)) = self.separation(k, &states[t], self.cfg.activation_margin) {
                    pairs.push((t, k, w));
                }
            }
        }
        // One slack per step that has an active pair.
        let mut slot_of = vec![usize::MAX; h + 1];
        let mut slots = 0;
        for &(t, _, _) in &pairs {
            if slot_of[t] == usize::MAX {
                slot_of[t] = slots;
                slots += 1;
            }
        }
        let n = nu + slots;
        let mut qp = QpProblem::new(n);

        // Tracking cost over t = 1..H in the linearized states.
        let weights = [1.0, 1.0, self.cfg.heading_weight];
        for t in 1..=h {
            let w = &self.reference.waypoints[t];
            let err = [states[t][0] - w.x, states[t][1] - w.y, normalize_angle(states[t][2] - w.theta)];
            for r in 0..3 {
                let row = phi.row(3 * t + r);
                let cols = 2 * t;
                for i in 0..cols {
                    let ri = row[i];
                    if ri == 0.0 {
                        continue;
                    }
                    qp.c[i] += 2.0 * weights[r] * err[r] * ri;
                    for j in 0..cols {
                        qp.q[(i, j)] += 2.0 * weights[r] * ri * row[j];
                    }
                }
            }
        }
        for i in 0..nu {
            qp.q[(i, i)] += 2.0 * self.cfg.proximal;
        }
        for i in nu..n {
            qp.q[(i, i)] = 1e-9;
            qp.c[i] = self.cfg.slack_penalty;
        }

        // Control box and per-step change bounds.
        let d = self.dynamics;
        let trust_radius = [self.cfg.trust_speed, self.cfg.trust_steer];
        for t in 0..h {
            for c in 0..2 {
                let i = 2 * t + c;
                let u = controls[t][c];
                // Box bounds merged with the trust region on the increment.
                let radius = trust_radius[c] * trust;
                let mut up = SparseRow::default();
                up.push(i, 1.0);
                qp.add_row(up, (d.u_max[c] - u).min(radius));
                let mut down = SparseRow::default();
                down.push(i, -1.0);
                qp.add_row(down, (u - d.u_min[c]).min(radius));
                let prev = if t == 0 { self.u_prev.map(|p| p[c]) } else { Some(controls[t - 1][c]) };
                if let Some(p) = prev {
                    let diff = u - p;
                    let mut inc = SparseRow::default();
                    inc.push(i, 1.0);
                    if t > 0 {
                        inc.push(i - 2, -1.0);
                    }
                    let mut dec = SparseRow::default();
                    dec.push(i, -1.0);
                    if t > 0 {
                        dec.push(i - 2, 1.0);
                    }
                    qp.add_row(inc, d.a_max[c] - diff);
                    qp.add_row(dec, diff - d.a_min[c]);
                }
            }
        }

        // Clearance constraints, one per ego vertex, with a shared slack.
        // Every row at step t combines the same three state sensitivities.
        let mut basis_of = vec![usize::MAX; h + 1];
        for &(t, k, w) in &pairs {
            if basis_of[t] == usize::MAX {
                basis_of[t] = qp.add_basis(phi.view((3 * t, 0), (3, 2 * t)).into_owned());
            }
            let slot = slot_of[t];
            let ob = &self.obstacles[k];
            let offset = ob.vertices.iter().map(|y| w.dot(y)).fold(f64::NEG_INFINITY, f64::max);
            let th = states[t][2];
            let (st, ct) = th.sin_cos();
            let r = rotation(th);
            let dr = Matrix2::new(-st, -ct, ct, -st);
            let p = Vec2::new(states[t][0], states[t][1]);
            for z in &self.ev_body {
                let x_bar = p + r * z;
                let turn = w.dot(&(dr * z));
                let mut slack = SparseRow::default();
                slack.push(nu + slot, -1.0);
                let coef = DVector::from_vec(vec![-w.x, -w.y, -turn]);
                qp.add_structured_row(basis_of[t], coef, slack, w.dot(&x_bar) - offset - self.d_safe);
            }
        }
        for slot in 0..slots {
            let mut nonneg = SparseRow::default();
            nonneg.push(nu + slot, -1.0);
            qp.add_row(nonneg, 0.0);
        }
        (qp, pairs.len())
    }
}

fn default_guess(reference: &ReferencePath, dynamics: &DynamicsModel) -> Vec<Control> {
    reference
        .waypoints
        .windows(2)
        .map(|w| Control::new((w[1].position() - w[0].position()).norm() / dynamics.dt, 0.0))
        .collect()
}

fn max_position_change(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt()).fold(0.0, f64::max)
}

/// Plans against the rectangle form of the given obstacles.
pub fn plan(
    reference: &ReferencePath,
    obstacles: &[InflatedObstacle],
    dynamics: &DynamicsModel,
    d_safe: f64,
    cfg: &PlannerConfig,
) -> Result<PlanResult> {
    let rects: Vec<OrientedRect> = obstacles.iter().map(|o| o.rect).collect();
    plan_rects(reference, &rects, dynamics, d_safe, cfg, &WarmStart::default())
}

/// Uncertainty-blind baseline: plans against the nominal rectangles at the
/// estimated centres.
pub fn plan_rda_baseline(
    reference: &ReferencePath,
    nominal: &[OrientedRect],
    dynamics: &DynamicsModel,
    d_safe: f64,
    cfg: &PlannerConfig,
    warm: &WarmStart,
) -> Result<PlanResult> {
    plan_rects(reference, nominal, dynamics, d_safe, cfg, warm)
}

fn final_merit(plan: &PlanResult) -> f64 {
    plan.merit_history.last().copied().unwrap_or(f64::INFINITY)
}

/// Fraction of the reference's progress achieved by the planned endpoint.
fn progress_ratio(reference: &ReferencePath, plan: &PlanResult) -> f64 {
    let (w0, wh) = (reference.waypoints[0], reference.waypoints[reference.horizon()]);
    let along = wh.position() - w0.position();
    let want = along.norm();
    if want < 1e-9 {
        return 1.0;
    }
    let got = (plan.states[plan.states.len() - 1].position() - plan.states[0].position()).dot(&along) / want;
    got / want
}

/// The reference displaced sideways by `offset` (positive to the left),
/// ramping in over the first half of the horizon.
fn shifted_reference(reference: &ReferencePath, offset: f64) -> ReferencePath {
    let h = reference.horizon().max(1) as f64;
    let waypoints = reference
        .waypoints
        .iter()
        .enumerate()
        .map(|(t, w)| {
            let ramp = (2.0 * t as f64 / h).min(1.0);
            let (s, c) = w.theta.sin_cos();
            Pose2::new(w.x - s * offset * ramp, w.y + c * offset * ramp, w.theta)
        })
        .collect();
    ReferencePath { waypoints }
}

/// [`plan_rects`] with lateral restarts. The local solver commits to the
/// separating direction it linearizes about, so a plan that stalls in
/// front of an obstacle can miss a gap beside it. When the first plan is
/// unconverged or makes too little progress, it is re-solved from warm
/// starts that track sideways-shifted references, and the best plan is
/// kept (converged first, then lowest merit).
pub fn plan_with_restarts(
    reference: &ReferencePath,
    rects: &[OrientedRect],
    dynamics: &DynamicsModel,
    d_safe: f64,
    cfg: &PlannerConfig,
    warm: &WarmStart,
) -> Result<PlanResult> {
    let mut best = plan_rects(reference, rects, dynamics, d_safe, cfg, warm)?;
    if best.converged && progress_ratio(reference, &best) >= cfg.restart_progress {
        return Ok(best);
    }
    for &offset in &cfg.lateral_restarts {
        let shifted = shifted_reference(reference, offset);
        let free = WarmStart { start: warm.start, u_prev: warm.u_prev, guess: warm.guess.clone() };
        let guide = plan_rects(&shifted, &[], dynamics, d_safe, cfg, &free)?;
        let seeded = WarmStart { start: warm.start, u_prev: warm.u_prev, guess: Some(guide.controls) };
        let candidate = plan_rects(reference, rects, dynamics, d_safe, cfg, &seeded)?;
        let better = match (candidate.converged, best.converged) {
            (true, false) => true,
            (false, true) => false,
            _ => final_merit(&candidate) < final_merit(&best),
        };
        if better {
            best = candidate;
        }
    }
    Ok(best)
}

/// Plans against arbitrary rectangles with optional warm start.
pub fn plan_rects(
    reference: &ReferencePath,
    rects: &[OrientedRect],
    dynamics: &DynamicsModel,
    d_safe: f64,
    cfg: &PlannerConfig,
    warm: &WarmStart,
) -> Result<PlanResult> {
    dynamics.validate()?;
    let h = reference.horizon();
    if h == 0 {
        return Err(PisacError::Config("reference needs at least two waypoints".into()));
    }
    if !(d_safe >= 0.0) {
        return Err(PisacError::Config("d_safe must be nonnegative".into()));
    }
    let ev_rect = OrientedRect::from_extents(Pose2::new(0.0, 0.0, 0.0), cfg.ev_length, cfg.ev_width)?;
    let start = warm.start.unwrap_or(reference.waypoints[0]);
    let obstacles = rects
        .iter()
        .map(|r| {
            let (u, v) = r.axes();
            Ok(Obstacle {
                rect: *r,
                poly: rect_to_polytope(r)?,
                vertices: r.vertices(),
                normals: [u, v],
                radius: r.half_length.hypot(r.half_width),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ctx = Context {
        reference,
        dynamics,
        cfg,
        d_safe,
        ev_body: ev_rect.vertices(),
        ev_radius: ev_rect.half_length.hypot(ev_rect.half_width),
        ev_shape: rect_to_polytope(&ev_rect)?,
        obstacles,
        u_prev: warm.u_prev,
    };

    let start_rect = ev_rect.moved_to(start);
    for (k, ob) in ctx.obstacles.iter().enumerate() {
        if polygons_intersect(&start_rect.vertices(), &ob.vertices) && !cfg.relax_infeasible_start {
            return Err(PisacError::InfeasibleStart(k));
        }
    }

    let mut controls = match &warm.guess {
        Some(g) if !g.is_empty() => (0..h).map(|t| g[t.min(g.len() - 1)]).collect(),
        _ => default_guess(reference, dynamics),
    };
    dynamics.project(&mut controls, warm.u_prev.as_ref());
    let s0 = Vector3::new(start.x, start.y, start.theta);
    let mut states = dynamics.rollout(&s0, &controls);
    let mut merit = ctx.merit(&states);
    let mut merit_history = vec![merit];
    let mut trust = 1.0;
    let mut iterations = 0;
    let mut settled = false;
    let settings = QpSettings { max_iters: cfg.qp_max_iters, ..QpSettings::default() };

    while iterations < cfg.max_iters {
        iterations += 1;
        let lin = ctx.linearize(&states, &controls)?;
        let phi = ctx.sensitivities(&lin);
        let (qp, _) = ctx.build_qp(&states, &controls, &phi, trust);
        let step = match qp.solve(&settings) {
            Ok(sol) => sol.x,
            Err(_) => {
                trust *= 0.5;
                if trust < 1e-3 {
                    break;
                }
                continue;
            }
        };
        let mut candidate: Vec<Control> =
            controls.iter().enumerate().map(|(t, u)| u + Control::new(step[2 * t], step[2 * t + 1])).collect();
        dynamics.project(&mut candidate, warm.u_prev.as_ref());
        let cand_states = dynamics.rollout(&s0, &candidate);
        let cand_merit = ctx.merit(&cand_states);
        let change = max_position_change(&cand_states, &states);
        let small = change < cfg.tol_traj;
        if cand_merit <= merit || (small && cand_merit <= merit + 1e-9 * merit.abs().max(1.0)) {
            let stalled = merit - cand_merit <= cfg.tol_merit * merit.abs().max(1.0);
            controls = candidate;
            states = cand_states;
            merit = cand_merit;
            merit_history.push(merit);
            trust = (trust * 2.0).min(1.0);
            if small || stalled {
                settled = true;
                break;
            }
        } else {
            trust *= 0.5;
            if trust < 1e-3 {
                // No model step improves the merit: a stationary point.
                settled = true;
                break;
            }
        }
    }

    finish(&ctx, states, controls, iterations, settled, merit_history)
}

fn finish(
    ctx: &Context,
    states: Vec<Vector3<f64>>,
    controls: Vec<Control>,
    iterations: usize,
    settled: bool,
    merit_history: Vec<f64>,
) -> Result<PlanResult> {
    let poses: Vec<Pose2> = states.iter().map(pose_of).collect();
    let ev_rect = OrientedRect::from_extents(Pose2::new(0.0, 0.0, 0.0), ctx.cfg.ev_length, ctx.cfg.ev_width)?;
    let mut duals = DualVars::default();
    let mut min_clearance = f64::INFINITY;
    for ob in &ctx.obstacles {
        let mut lambdas = Vec::with_capacity(poses.len());
        let mut mus = Vec::with_capacity(poses.len());
        for (t, pose) in poses.iter().enumerate() {
            let cert = dual_distance(pose, &ob.poly, &ctx.ev_shape);
            lambdas.push(cert.lambda);
            mus.push(cert.mu);
            if t > 0 {
                min_clearance = min_clearance.min(rect_distance(&ev_rect.moved_to(*pose), &ob.rect));
            }
        }
        duals.lambda.push(lambdas);
        duals.mu.push(mus);
    }
    let linearization = poses
        .iter()
        .zip(&controls)
        .map(|(p, u)| linearize_vec(&Vector3::new(p.x, p.y, p.theta), u, ctx.dynamics))
        .collect::<Result<Vec<_>>>()?;
    let tracking_cost = ctx.tracking_cost(&states);
    let converged = settled && min_clearance >= ctx.d_safe - 1e-3;
    Ok(PlanResult {
        states: poses,
        controls,
        duals,
        linearization,
        tracking_cost,
        min_clearance,
        iterations,
        converged,
        merit_history,
    })
}

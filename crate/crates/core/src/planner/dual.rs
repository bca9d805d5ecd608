//! Dual form of the polytope distance. For an ego shape
//! `{R z + p : G z <= g}` and an obstacle `{y : D y <= b}`, any `lambda,
//! mu >= 0` with `G^T mu = -R^T D^T lambda` and `|D^T lambda| <= 1` gives
//! the lower bound `lambda^T (D p - b) - mu^T g` on the distance, with
//! equality at the optimum when the sets are disjoint.

use nalgebra::{Matrix2, Vector4};
use serde::{Deserialize, Serialize};

use crate::geometry::{rotation, HalfspacePolytope, Pose2, Vec2};

/// Optimal dual certificate for one ego pose and obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualCertificate {
    /// Separation distance, zero when the sets touch or overlap.
    pub distance: f64,
    /// Separation when positive, minus the penetration depth otherwise.
    pub signed_distance: f64,
    /// Unit separating direction `D^T lambda`, pointing from the obstacle
    /// towards the ego vehicle.
    pub direction: Vec2,
    pub lambda: Vector4<f64>,
    pub mu: Vector4<f64>,
    /// `lambda^T b`, the obstacle's support value along `direction`.
    pub offset: f64,
    pub overlap: bool,
}

/// `min c^T x` over `x >= 0` with `rows^T x = target`, using the fact that
/// a basic optimum has at most two nonzero entries.
fn min_conic_combination(rows: &[Vec2; 4], cost: &Vector4<f64>, target: &Vec2) -> Vector4<f64> {
    let mut best = Vector4::zeros();
    let mut best_cost = f64::INFINITY;
    for i in 0..4 {
        for j in (i + 1)..4 {
            let m = Matrix2::from_columns(&[rows[i], rows[j]]);
            let det = m.determinant();
            if det.abs() < 1e-12 {
                continue;
            }
            let Some(inv) = m.try_inverse() else { continue };
            let coef = inv * target;
            if coef[0] < -1e-12 || coef[1] < -1e-12 {
                continue;
            }
            let mut x = Vector4::zeros();
            x[i] = coef[0].max(0.0);
            x[j] = coef[1].max(0.0);
            let c = cost.dot(&x);
            if c < best_cost {
                best_cost = c;
                best = x;
            }
        }
    }
    best
}

fn rows_of(p: &HalfspacePolytope) -> [Vec2; 4] {
    [0, 1, 2, 3].map(|i| Vec2::new(p.a[(i, 0)], p.a[(i, 1)]))
}

/// Signed separation `max_{|w|=1} min_{i,j} w . (x_i - y_j)` of two convex
/// polygons, with the maximizing direction. The optimum is attained at an
/// edge normal of either polygon or at a normalized vertex difference.
pub(crate) fn signed_separation(ev: &[Vec2], obs: &[Vec2], normals: &[Vec2]) -> (f64, Vec2) {
    let eval = |w: &Vec2| {
        let lo = ev.iter().map(|x| w.dot(x)).fold(f64::INFINITY, f64::min);
        let hi = obs.iter().map(|y| w.dot(y)).fold(f64::NEG_INFINITY, f64::max);
        lo - hi
    };
    let mut best = (f64::NEG_INFINITY, Vec2::new(1.0, 0.0));
    let mut consider = |w: Vec2| {
        let v = eval(&w);
        if v > best.0 {
            best = (v, w);
        }
    };
    for n in normals {
        consider(*n);
        consider(-n);
    }
    for x in ev {
        for y in obs {
            let c = x - y;
            let norm = c.norm();
            if norm > 1e-15 {
                consider(c / norm);
            }
        }
    }
    best
}

/// Solves the dual distance problem for the ego shape (body frame) placed
/// at `ev_pose` against `obstacle` (world frame).
pub fn dual_distance(ev_pose: &Pose2, obstacle: &HalfspacePolytope, ev_shape: &HalfspacePolytope) -> DualCertificate {
    let rot = rotation(ev_pose.theta);
    let p = ev_pose.position();
    let ev: Vec<Vec2> = ev_shape.vertices().iter().map(|z| rot * z + p).collect();
    let obs = obstacle.vertices();
    let d_rows = rows_of(obstacle);
    let g_rows = rows_of(ev_shape);
    let mut normals: Vec<Vec2> = d_rows.to_vec();
    normals.extend(g_rows.iter().map(|n| rot * n));
    let (value, w) = signed_separation(&ev, &obs, &normals);

    let lambda = min_conic_combination(&d_rows, &obstacle.b, &w);
    let y = -(rot.transpose() * w);
    let mu = min_conic_combination(&g_rows, &ev_shape.b, &y);
    DualCertificate {
        distance: value.max(0.0),
        signed_distance: value,
        direction: w,
        offset: lambda.dot(&obstacle.b),
        lambda,
        mu,
        overlap: value < -1e-12,
    }
}

impl DualCertificate {
    /// Dual objective `lambda^T (D p - b) - mu^T g` at an ego pose.
    pub fn objective(&self, ev_pose: &Pose2, obstacle: &HalfspacePolytope, ev_shape: &HalfspacePolytope) -> f64 {
        let dp = obstacle.a * ev_pose.position();
        self.lambda.dot(&(dp - obstacle.b)) - self.mu.dot(&ev_shape.b)
    }

    /// Residual of `G^T mu + R^T D^T lambda = 0` and of the norm bound.
    pub fn feasibility_residual(&self, ev_pose: &Pose2, obstacle: &HalfspacePolytope, ev_shape: &HalfspacePolytope) -> f64 {
        let w = obstacle.a.transpose() * self.lambda;
        let eq = ev_shape.a.transpose() * self.mu + rotation(ev_pose.theta).transpose() * w;
        let neg = self.lambda.iter().chain(self.mu.iter()).map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        eq.amax().max((w.norm() - 1.0).max(0.0)).max(neg)
    }
}

use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{PisacError, Result};
use crate::geometry::Pose2;

/// Control input `(speed m/s, steering angle rad)`.
pub type Control = Vector2<f64>;

/// Kinematic bicycle with box bounds on controls and per-step changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsModel {
    pub wheelbase: f64,
    pub dt: f64,
    pub u_min: [f64; 2],
    pub u_max: [f64; 2],
    pub a_min: [f64; 2],
    pub a_max: [f64; 2],
}

impl Default for DynamicsModel {
    fn default() -> Self {
        Self {
            wheelbase: 2.875,
            dt: 0.1,
            u_min: [0.0, -0.6],
            u_max: [10.0, 0.6],
            a_min: [-1.0, -0.3],
            a_max: [1.0, 0.3],
        }
    }
}

/// Steering angles closer than this to +-pi/2 are rejected.
const STEER_MARGIN: f64 = 1e-3;

impl DynamicsModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.wheelbase > 0.0) {
            return Err(PisacError::Config("dt and wheelbase must be positive".into()));
        }
        for i in 0..2 {
            if !(self.u_min[i] <= self.u_max[i]) || !(self.a_min[i] <= 0.0 && 0.0 <= self.a_max[i]) {
                return Err(PisacError::Config("control bounds must be ordered and deltas must bracket zero".into()));
            }
        }
        if self.u_max[1].abs().max(self.u_min[1].abs()) >= std::f64::consts::FRAC_PI_2 - STEER_MARGIN {
            return Err(PisacError::SingularSteering(self.u_max[1].abs().max(self.u_min[1].abs())));
        }
        Ok(())
    }

    /// One step of the nonlinear model on `(x, y, theta)` (heading unwrapped).
    pub fn step(&self, s: &Vector3<f64>, u: &Control) -> Vector3<f64> {
        let (v, psi) = (u[0], u[1]);
        Vector3::new(
            s[0] + self.dt * v * s[2].cos(),
            s[1] + self.dt * v * s[2].sin(),
            s[2] + self.dt * v * psi.tan() / self.wheelbase,
        )
    }

    pub fn step_pose(&self, s: &Pose2, u: &Control) -> Pose2 {
        let n = self.step(&Vector3::new(s.x, s.y, s.theta), u);
        Pose2::new(n[0], n[1], n[2])
    }

    pub fn rollout(&self, s0: &Vector3<f64>, controls: &[Control]) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(controls.len() + 1);
        out.push(*s0);
        for u in controls {
            let next = self.step(out.last().unwrap(), u);
            out.push(next);
        }
        out
    }

    /// Clamps each control to the box and to the per-step change bounds
    /// relative to its predecessor (`u_prev` for the first one).
    pub fn project(&self, controls: &mut [Control], u_prev: Option<&Control>) {
        let mut prev = u_prev.copied();
        for u in controls.iter_mut() {
            for i in 0..2 {
                let (mut lo, mut hi) = (self.u_min[i], self.u_max[i]);
                if let Some(p) = prev {
                    lo = lo.max(p[i] + self.a_min[i]);
                    hi = hi.min(p[i] + self.a_max[i]);
                }
                u[i] = u[i].clamp(lo, hi);
            }
            prev = Some(*u);
        }
    }

    /// Largest violation of the box and delta bounds (zero when feasible).
    pub fn control_violation(&self, controls: &[Control], u_prev: Option<&Control>) -> f64 {
        let mut worst: f64 = 0.0;
        let mut prev = u_prev.copied();
        for u in controls {
            for i in 0..2 {
                worst = worst.max(self.u_min[i] - u[i]).max(u[i] - self.u_max[i]);
                if let Some(p) = prev {
                    let d = u[i] - p[i];
                    worst = worst.max(self.a_min[i] - d).max(d - self.a_max[i]);
                }
            }
            prev = Some(*u);
        }
        worst
    }
}

/// Affine model `s+ = A s + B u + c` of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearStep {
    pub a: Matrix3<f64>,
    pub b: Matrix3x2<f64>,
    pub c: Vector3<f64>,
}

impl LinearStep {
    pub fn apply(&self, s: &Vector3<f64>, u: &Control) -> Vector3<f64> {
        self.a * s + self.b * u + self.c
    }
}

pub(crate) fn linearize_vec(s: &Vector3<f64>, u: &Control, dynamics: &DynamicsModel) -> Result<LinearStep> {
    let (v, psi, th) = (u[0], u[1], s[2]);
    if (std::f64::consts::FRAC_PI_2 - psi.abs()) < STEER_MARGIN {
        return Err(PisacError::SingularSteering(psi.abs()));
    }
    let dt = dynamics.dt;
    let l = dynamics.wheelbase;
    let (st, ct) = th.sin_cos();
    let mut a = Matrix3::identity();
    a[(0, 2)] = -dt * v * st;
    a[(1, 2)] = dt * v * ct;
    let sec2 = 1.0 / psi.cos().powi(2);
    let b = Matrix3x2::new(dt * ct, 0.0, dt * st, 0.0, dt * psi.tan() / l, dt * v * sec2 / l);
    let c = dynamics.step(s, u) - a * s - b * u;
    Ok(LinearStep { a, b, c })
}

/// First-order expansion of the bicycle step about `(ref_state, ref_control)`.
pub fn linearize_dynamics(ref_state: &Pose2, ref_control: &Control, dynamics: &DynamicsModel) -> Result<LinearStep> {
    linearize_vec(&Vector3::new(ref_state.x, ref_state.y, ref_state.theta), ref_control, dynamics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_speed_linearization() {
        let dynamics = DynamicsModel::default();
        let s = Pose2::new(1.0, 2.0, 0.4);
        let u = Control::new(0.0, 0.2);
        let lin = linearize_dynamics(&s, &u, &dynamics).unwrap();
        assert_relative_eq!(lin.b[(0, 0)], 0.1 * 0.4f64.cos());
        assert_relative_eq!(lin.b[(1, 0)], 0.1 * 0.4f64.sin());
        assert_relative_eq!(lin.b[(2, 0)], 0.1 * 0.2f64.tan() / 2.875);
        assert_eq!(lin.b[(2, 1)], 0.0);
        assert_eq!(lin.a, Matrix3::identity());
    }

    #[test]
    fn straight_motion_is_exact() {
        let dynamics = DynamicsModel::default();
        let s = Pose2::new(409.2, 28.0, std::f64::consts::FRAC_PI_2);
        let u = Control::new(5.0, 0.0);
        let next = dynamics.step_pose(&s, &u);
        assert_relative_eq!(next.x, 409.2, epsilon = 1e-12);
        assert_relative_eq!(next.y, 28.5, epsilon = 1e-12);
        let lin = linearize_dynamics(&s, &u, &dynamics).unwrap();
        let sv = Vector3::new(s.x, s.y, s.theta);
        let l = lin.apply(&sv, &u);
        assert_relative_eq!(l[0], next.x, epsilon = 1e-12);
        assert_relative_eq!(l[1], next.y, epsilon = 1e-12);
        assert_relative_eq!(l[2], next.theta, epsilon = 1e-12);
    }

    #[test]
    fn linearization_error_is_second_order() {
        let dynamics = DynamicsModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0));
            let u = Control::new(rng.gen_range(0.5..8.0), rng.gen_range(-0.5..0.5));
            let lin = linearize_vec(&s, &u, &dynamics).unwrap();
            let ds = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let du = Control::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let err = |h: f64| (dynamics.step(&(s + ds * h), &(u + du * h)) - lin.apply(&(s + ds * h), &(u + du * h))).norm();
            let (e1, e2) = (err(0.02), err(0.01));
            assert!(e1 > 0.0);
            let ratio = e1 / e2;
            assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
        }
    }

    #[test]
    fn singular_steering_rejected() {
        let dynamics = DynamicsModel::default();
        let s = Pose2::new(0.0, 0.0, 0.0);
        assert!(matches!(
            linearize_dynamics(&s, &Control::new(1.0, std::f64::consts::FRAC_PI_2 - 1e-6), &dynamics),
            Err(PisacError::SingularSteering(_))
        ));
    }

    #[test]
    fn projection_enforces_all_bounds() {
        let dynamics = DynamicsModel::default();
        let mut u = vec![Control::new(12.0, 0.9), Control::new(-3.0, -0.9), Control::new(4.0, 0.0)];
        let prev = Control::new(0.5, 0.0);
        dynamics.project(&mut u, Some(&prev));
        assert_eq!(dynamics.control_violation(&u, Some(&prev)), 0.0);
        assert_relative_eq!(u[0][0], 1.5);
        assert_relative_eq!(u[0][1], 0.3);
    }
}

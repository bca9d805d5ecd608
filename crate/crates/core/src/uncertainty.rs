//! Turns a Gaussian position covariance into deterministic safety geometry:
//! the 2-dof chi-square quantile, the confidence ellipse, and the inflated
//! rectangle / disc pair that a planner can treat as a hard obstacle.
//!
//! The confidence level is `1 - risk_eps`, so a clearance constraint
//! against the inflated set bounds the collision probability by `risk_eps`.

use nalgebra::{Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{PisacError, Result};
use crate::geometry::{dca_decompose, DiscPair, OrientedRect, Vec2};
use crate::isac::{CrbModel, SensingCovariance};

/// Quantile of the chi-square distribution with two degrees of freedom.
pub fn chi2_quantile_2dof(prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(PisacError::Domain(prob));
    }
    Ok(-2.0 * (-prob).ln_1p())
}

/// CDF of the chi-square distribution with two degrees of freedom.
pub fn chi2_cdf_2dof(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -(-0.5 * x).exp_m1()
    }
}

/// `{x : (x - m)^T M^-1 (x - m) <= 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEllipse {
    pub center: Vec2,
    pub shape: Matrix2<f64>,
}

impl ConfidenceEllipse {
    pub fn contains(&self, x: &Vec2) -> bool {
        self.mahalanobis2(x) <= 1.0
    }

    pub fn mahalanobis2(&self, x: &Vec2) -> f64 {
        let d = x - self.center;
        match self.shape.try_inverse() {
            Some(inv) => d.dot(&(inv * d)),
            None => f64::INFINITY,
        }
    }

    /// Semi-axis lengths, largest first.
    pub fn semi_axes(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.shape);
        let (a, b) = (eig.eigenvalues[0].max(0.0).sqrt(), eig.eigenvalues[1].max(0.0).sqrt());
        (a.max(b), a.min(b))
    }

    /// Half-extent of the ellipse along a unit direction.
    pub fn support_half_width(&self, dir: &Vec2) -> f64 {
        dir.dot(&(self.shape * dir)).max(0.0).sqrt()
    }
}

/// Confidence ellipse of probability `1 - risk_eps` for `N(mean, cov)`.
pub fn confidence_ellipse(mean: Vec2, cov: &SensingCovariance, risk_eps: f64) -> Result<ConfidenceEllipse> {
    let q = chi2_quantile_2dof(1.0 - risk_eps)?;
    let s = cov.sigma;
    let sym = (s - s.transpose()).norm() <= 1e-12 * s.norm();
    if !sym || !(s[(0, 0)] > 0.0) || !(s.determinant() > 0.0) || !s.iter().all(|v| v.is_finite()) {
        return Err(PisacError::DegenerateGeometry("covariance is not positive definite".into()));
    }
    Ok(ConfidenceEllipse { center: mean, shape: s * q })
}

/// Obstacle footprint enlarged for position uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflatedObstacle {
    pub rect: OrientedRect,
    pub discs: DiscPair,
    pub power_used: f64,
    pub quantile: f64,
}

impl InflatedObstacle {
    /// The nominal footprint with no inflation.
    pub fn nominal(rect: OrientedRect) -> Self {
        Self { rect, discs: dca_decompose(&rect), power_used: f64::INFINITY, quantile: 0.0 }
    }
}

/// Inflated disc radius `r0 + sqrt(q (c11 + c22) / p)`.
pub fn inflated_disc_radius(r0: f64, crb: &CrbModel, p: f64, quantile: f64) -> f64 {
    r0 + (quantile * crb.trace() / p).sqrt()
}

/// Per-axis inflation in the rectangle's body frame: the half-widths of
/// the confidence ellipse's bounding box along the long and short axes.
/// For a heading of zero these are `sqrt(q c11 / p)` and `sqrt(q c22 / p)`.
pub fn rect_inflation(nominal: &OrientedRect, crb: &CrbModel, p: f64, quantile: f64) -> (f64, f64) {
    let sigma = Matrix2::new(crb.c11, 0.0, 0.0, crb.c22) / p;
    let (u, v) = nominal.axes();
    let along = (quantile * u.dot(&(sigma * u))).max(0.0).sqrt();
    let across = (quantile * v.dot(&(sigma * v))).max(0.0).sqrt();
    (along, across)
}

/// Inflates `nominal` (already centred on the estimate) for beam power `p`
/// at confidence `1 - risk_eps`.
pub fn inflate_obstacle(nominal: &OrientedRect, crb: &CrbModel, p: f64, risk_eps: f64) -> Result<InflatedObstacle> {
    if !(p > 0.0) {
        return Err(PisacError::InvalidPower(p));
    }
    let q = chi2_quantile_2dof(1.0 - risk_eps)?;
    let (along, across) = rect_inflation(nominal, crb, p, q);
    let rect = OrientedRect::new(nominal.center, nominal.half_length + along, nominal.half_width + across)?;
    let base = dca_decompose(nominal);
    let discs = base.with_radius(inflated_disc_radius(base.radius, crb, p, q));
    Ok(InflatedObstacle { rect, discs, power_used: p, quantile: q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn quantile_examples() {
        assert!(chi2_quantile_2dof(1e-12).unwrap() < 1e-11);
        assert_relative_eq!(chi2_quantile_2dof(1.0 - (-1f64).exp()).unwrap(), 2.0, max_relative = 1e-12);
        assert_relative_eq!(chi2_quantile_2dof(0.95).unwrap(), -2.0 * 0.05f64.ln(), max_relative = 1e-14);
        assert_abs_diff_eq!(chi2_quantile_2dof(0.95).unwrap(), 5.99146, epsilon = 1e-5);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(chi2_quantile_2dof(bad), Err(PisacError::Domain(_))));
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            assert_abs_diff_eq!(chi2_cdf_2dof(chi2_quantile_2dof(p).unwrap()), p, epsilon = 1e-12);
        }
    }

    #[test]
    fn ellipse_semi_axes() {
        let cov = SensingCovariance { sigma: Matrix2::identity() };
        let e = confidence_ellipse(Vec2::zeros(), &cov, (-1f64).exp()).unwrap();
        let (a, b) = e.semi_axes();
        assert_relative_eq!(a, 2f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(b, 2f64.sqrt(), max_relative = 1e-12);

        let cov = SensingCovariance { sigma: Matrix2::new(4.0, 0.0, 0.0, 1.0) };
        let e = confidence_ellipse(Vec2::zeros(), &cov, 0.05).unwrap();
        let q = chi2_quantile_2dof(0.95).unwrap();
        let (a, b) = e.semi_axes();
        assert_relative_eq!(a, 2.0 * q.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(b, q.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let cov = SensingCovariance { sigma: Matrix2::new(1.0, 0.0, 0.0, 0.0) };
        assert!(confidence_ellipse(Vec2::zeros(), &cov, 0.05).is_err());
    }

    #[test]
    fn inflation_formula_example() {
        // q = 4 corresponds to risk exp(-2).
        let risk = (-2f64).exp();
        let nominal = OrientedRect::new(Pose2::new(0.0, 0.0, 0.0), 1.0, 0.5).unwrap();
        let crb = CrbModel::from_matrix(Matrix2::identity());
        let inf = inflate_obstacle(&nominal, &crb, 4.0, risk).unwrap();
        assert_relative_eq!(inf.quantile, 4.0, max_relative = 1e-12);
        assert_relative_eq!(inf.rect.half_length, 2.0, max_relative = 1e-12);
        assert_relative_eq!(inf.rect.half_width, 1.5, max_relative = 1e-12);
        let r0 = dca_decompose(&nominal).radius;
        assert_relative_eq!(inf.discs.radius, r0 + (4.0f64 * 2.0 / 4.0).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn inflation_vanishes_with_power() {
        let nominal = OrientedRect::new(Pose2::new(3.0, 1.0, 0.7), 2.3, 0.9).unwrap();
        let crb = CrbModel::from_matrix(Matrix2::new(2.0, 0.0, 0.0, 5.0));
        let inf = inflate_obstacle(&nominal, &crb, 1e14, 0.05).unwrap();
        assert_abs_diff_eq!(inf.rect.half_length, nominal.half_length, epsilon = 1e-6);
        assert_abs_diff_eq!(inf.rect.half_width, nominal.half_width, epsilon = 1e-6);
        assert!(inflate_obstacle(&nominal, &crb, 0.0, 0.05).is_err());
    }

    #[test]
    fn inflation_monotone_in_power_and_confidence() {
        let nominal = OrientedRect::new(Pose2::new(0.0, 0.0, 1.2), 2.3, 0.9).unwrap();
        let crb = CrbModel::from_matrix(Matrix2::new(2.0, 0.0, 0.0, 5.0));
        let lo = inflate_obstacle(&nominal, &crb, 1.0, 0.05).unwrap();
        let hi = inflate_obstacle(&nominal, &crb, 2.0, 0.05).unwrap();
        assert!(hi.rect.half_length < lo.rect.half_length);
        assert!(hi.rect.half_width < lo.rect.half_width);
        assert!(hi.discs.radius < lo.discs.radius);
        let riskier = inflate_obstacle(&nominal, &crb, 1.0, 0.2).unwrap();
        assert!(riskier.rect.half_width < lo.rect.half_width);
    }

    #[test]
    fn inflated_discs_cover_inflated_rect() {
        let nominal = OrientedRect::new(Pose2::new(0.0, 0.0, 0.4), 2.347, 0.9245).unwrap();
        let crb = CrbModel::from_matrix(Matrix2::new(3.0, 0.0, 0.0, 0.5));
        let inf = inflate_obstacle(&nominal, &crb, 2.0, 0.05).unwrap();
        for v in inf.rect.vertices() {
            assert!(inf.discs.covers(&v, 1e-12));
        }
    }
}

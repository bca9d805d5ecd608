//! Planar rigid-body geometry: poses, oriented rectangles, their halfspace
//! form, exact convex-polygon distance and the double-disc cover.

use nalgebra::{Matrix2, SMatrix, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{PisacError, Result};

pub type Vec2 = Vector2<f64>;

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Rotation matrix for heading `theta`.
pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Planar pose (x, y, heading).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn heading(&self) -> Vec2 {
        Vec2::new(self.theta.cos(), self.theta.sin())
    }

    pub fn with_position(&self, p: Vec2) -> Self {
        Self::new(p.x, p.y, self.theta)
    }
}

/// Rectangle with its long axis along the pose heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub center: Pose2,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedRect {
    /// Builds a rectangle from half extents. If `half_width > half_length`
    /// the extents are swapped and the heading turned by pi/2 so the long
    /// axis stays on the heading axis.
    pub fn new(center: Pose2, half_length: f64, half_width: f64) -> Result<Self> {
        if !(half_length > 0.0 && half_width > 0.0) || !half_length.is_finite() || !half_width.is_finite() {
            return Err(PisacError::InvalidGeometry(format!(
                "rectangle half extents must be positive, got ({half_length}, {half_width})"
            )));
        }
        if half_width > half_length {
            return Ok(Self {
                center: Pose2::new(center.x, center.y, center.theta + PI / 2.0),
                half_length: half_width,
                half_width: half_length,
            });
        }
        Ok(Self {
            center: Pose2::new(center.x, center.y, center.theta),
            half_length,
            half_width,
        })
    }

    /// Builds a rectangle from full length and width.
    pub fn from_extents(center: Pose2, length: f64, width: f64) -> Result<Self> {
        Self::new(center, 0.5 * length, 0.5 * width)
    }

    pub fn length(&self) -> f64 {
        2.0 * self.half_length
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_width
    }

    /// Unit vectors of the long and short body axes.
    pub fn axes(&self) -> (Vec2, Vec2) {
        let u = self.center.heading();
        (u, Vec2::new(-u.y, u.x))
    }

    /// Corners in counter-clockwise order.
    pub fn vertices(&self) -> [Vec2; 4] {
        let c = self.center.position();
        let (u, v) = self.axes();
        let a = u * self.half_length;
        let b = v * self.half_width;
        [c + a + b, c - a + b, c - a - b, c + a - b]
    }

    /// Point membership via the inverse rigid transform.
    pub fn contains(&self, p: &Vec2) -> bool {
        let local = rotation(-self.center.theta) * (p - self.center.position());
        local.x.abs() <= self.half_length && local.y.abs() <= self.half_width
    }

    pub fn moved_to(&self, pose: Pose2) -> Self {
        Self { center: pose, ..*self }
    }
}

/// The set `{o : A o <= b}` with four unit-norm rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfspacePolytope {
    pub a: SMatrix<f64, 4, 2>,
    pub b: Vector4<f64>,
}

impl HalfspacePolytope {
    /// Normalizes the rows and checks that the set is bounded and nonempty.
    pub fn new(a: SMatrix<f64, 4, 2>, b: Vector4<f64>) -> Result<Self> {
        let mut a = a;
        let mut b = b;
        for i in 0..4 {
            let n = a.row(i).norm();
            if n <= 1e-12 || !n.is_finite() {
                return Err(PisacError::InvalidGeometry(format!("row {i} has zero normal")));
            }
            let row = a.row(i) / n;
            a.set_row(i, &row);
            b[i] /= n;
        }
        let poly = Self { a, b };
        if poly.has_recession_direction() {
            return Err(PisacError::InvalidGeometry("polytope is unbounded".into()));
        }
        if poly.vertices().len() < 3 {
            return Err(PisacError::InvalidGeometry("polytope is empty or degenerate".into()));
        }
        Ok(poly)
    }

    fn normal(&self, i: usize) -> Vec2 {
        Vec2::new(self.a[(i, 0)], self.a[(i, 1)])
    }

    // A nonzero d with A d <= 0 exists iff one lies on a boundary direction.
    fn has_recession_direction(&self) -> bool {
        for i in 0..4 {
            let n = self.normal(i);
            for d in [Vec2::new(-n.y, n.x), Vec2::new(n.y, -n.x)] {
                if (0..4).all(|j| self.normal(j).dot(&d) <= 1e-12) {
                    return true;
                }
            }
        }
        false
    }

    pub fn contains(&self, p: &Vec2, tol: f64) -> bool {
        (0..4).all(|i| self.normal(i).dot(p) <= self.b[i] + tol)
    }

    /// Vertices in counter-clockwise order, computed from pairwise
    /// intersections of the boundary lines.
    pub fn vertices(&self) -> Vec<Vec2> {
        let mut pts: Vec<Vec2> = Vec::with_capacity(4);
        for i in 0..4 {
            for j in (i + 1)..4 {
                let m = Matrix2::new(self.a[(i, 0)], self.a[(i, 1)], self.a[(j, 0)], self.a[(j, 1)]);
                let det = m.determinant();
                if det.abs() < 1e-12 {
                    continue;
                }
                let rhs = Vec2::new(self.b[i], self.b[j]);
                let p = m.try_inverse().map(|inv| inv * rhs);
                if let Some(p) = p {
                    let scale = 1.0 + p.norm();
                    if self.contains(&p, 1e-9 * scale)
                        && !pts.iter().any(|q| (q - p).norm() <= 1e-9 * scale)
                    {
                        pts.push(p);
                    }
                }
            }
        }
        if pts.is_empty() {
            return pts;
        }
        let c = pts.iter().fold(Vec2::zeros(), |acc, p| acc + p) / pts.len() as f64;
        pts.sort_by(|p, q| {
            let ap = (p.y - c.y).atan2(p.x - c.x);
            let aq = (q.y - c.y).atan2(q.x - c.x);
            ap.total_cmp(&aq)
        });
        pts
    }
}

/// Halfspace form of a rectangle. Row order: +long, +short, -long, -short
/// body axes.
pub fn rect_to_polytope(r: &OrientedRect) -> Result<HalfspacePolytope> {
    if !(r.half_length > 0.0 && r.half_width > 0.0) {
        return Err(PisacError::InvalidGeometry(format!(
            "rectangle half extents must be positive, got ({}, {})",
            r.half_length, r.half_width
        )));
    }
    let (u, v) = r.axes();
    let c = r.center.position();
    let normals = [u, v, -u, -v];
    let offsets = [r.half_length, r.half_width, r.half_length, r.half_width];
    let mut a = SMatrix::<f64, 4, 2>::zeros();
    let mut b = Vector4::zeros();
    for i in 0..4 {
        a[(i, 0)] = normals[i].x;
        a[(i, 1)] = normals[i].y;
        b[i] = normals[i].dot(&c) + offsets[i];
    }
    Ok(HalfspacePolytope { a, b })
}

fn point_segment_distance(p: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn separated_by_edges_of(p: &[Vec2], q: &[Vec2]) -> bool {
    let n = p.len();
    for i in 0..n {
        let e = p[(i + 1) % n] - p[i];
        let normal = Vec2::new(e.y, -e.x);
        let max_p = p.iter().map(|x| normal.dot(x)).fold(f64::NEG_INFINITY, f64::max);
        let min_q = q.iter().map(|x| normal.dot(x)).fold(f64::INFINITY, f64::min);
        if min_q > max_p {
            return true;
        }
    }
    false
}

/// Whether two convex polygons (CCW vertex lists) intersect, by the
/// separating axis test.
pub fn polygons_intersect(p: &[Vec2], q: &[Vec2]) -> bool {
    !(separated_by_edges_of(p, q) || separated_by_edges_of(q, p))
}

/// Exact Euclidean distance between two convex polygons given as CCW
/// vertex lists; zero when they intersect.
pub fn polygon_distance(p: &[Vec2], q: &[Vec2]) -> f64 {
    if polygons_intersect(p, q) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for (src, dst) in [(p, q), (q, p)] {
        let m = dst.len();
        for v in src {
            for j in 0..m {
                best = best.min(point_segment_distance(v, &dst[j], &dst[(j + 1) % m]));
            }
        }
    }
    best
}

/// Exact separation distance between two bounded halfspace polytopes.
pub fn polytope_distance(p: &HalfspacePolytope, q: &HalfspacePolytope) -> f64 {
    polygon_distance(&p.vertices(), &q.vertices())
}

/// Distance between two rectangles, skipping the halfspace round trip.
pub fn rect_distance(a: &OrientedRect, b: &OrientedRect) -> f64 {
    polygon_distance(&a.vertices(), &b.vertices())
}

/// Two identical discs covering a rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscPair {
    pub centers: [Vec2; 2],
    pub radius: f64,
}

impl DiscPair {
    pub fn covers(&self, p: &Vec2, tol: f64) -> bool {
        self.centers.iter().any(|c| (p - c).norm() <= self.radius + tol)
    }

    pub fn with_radius(&self, radius: f64) -> Self {
        Self { centers: self.centers, radius }
    }
}

/// Splits the rectangle in two halves along its long axis and returns the
/// circumscribed disc of each half.
pub fn dca_decompose(r: &OrientedRect) -> DiscPair {
    let (u, _) = r.axes();
    let c = r.center.position();
    let offset = 0.5 * r.half_length;
    DiscPair {
        centers: [c + u * offset, c - u * offset],
        radius: offset.hypot(r.half_width),
    }
}

/// Minimum over the four center pairs of center distance minus both radii.
/// Negative values indicate overlapping discs.
pub fn min_disc_distance(a: &DiscPair, b: &DiscPair) -> f64 {
    let mut best = f64::INFINITY;
    for ca in &a.centers {
        for cb in &b.centers {
            best = best.min((ca - cb).norm());
        }
    }
    best - a.radius - b.radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_square(x: f64, y: f64, theta: f64) -> OrientedRect {
        OrientedRect::new(Pose2::new(x, y, theta), 0.5, 0.5).unwrap()
    }

    #[test]
    fn angle_normalization_range() {
        assert_abs_diff_eq!(normalize_angle(-PI), PI);
        assert_abs_diff_eq!(normalize_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(normalize_angle(0.25), 0.25);
        assert_abs_diff_eq!(normalize_angle(-0.25 - 4.0 * PI), -0.25, epsilon = 1e-12);
    }

    #[test]
    fn rect_rejects_nonpositive_extents() {
        let p = Pose2::new(0.0, 0.0, 0.0);
        assert!(matches!(OrientedRect::new(p, 0.0, 1.0), Err(PisacError::InvalidGeometry(_))));
        assert!(OrientedRect::new(p, 1.0, -1.0).is_err());
    }

    #[test]
    fn rect_swaps_to_keep_long_axis_on_heading() {
        let r = OrientedRect::new(Pose2::new(0.0, 0.0, 0.0), 0.5, 2.0).unwrap();
        assert_eq!(r.half_length, 2.0);
        assert_abs_diff_eq!(r.center.theta, PI / 2.0);
        assert!(r.contains(&Vec2::new(0.0, 1.9)));
        assert!(!r.contains(&Vec2::new(0.6, 0.0)));
    }

    #[test]
    fn axis_aligned_unit_square_polytope() {
        let poly = rect_to_polytope(&unit_square(0.0, 0.0, 0.0)).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(poly.b[i], 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(poly.a.row(i).norm(), 1.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(poly.a[(0, 0)], 1.0);
        assert_abs_diff_eq!(poly.a[(1, 1)], 1.0);
        assert_abs_diff_eq!(poly.a[(2, 0)], -1.0);
        assert_abs_diff_eq!(poly.a[(3, 1)], -1.0);
    }

    #[test]
    fn rotated_square_membership() {
        let poly = rect_to_polytope(&unit_square(0.0, 0.0, PI / 2.0)).unwrap();
        assert!(poly.contains(&Vec2::new(0.49, 0.0), 0.0));
        assert!(!poly.contains(&Vec2::new(0.51, 0.0), 0.0));
    }

    #[test]
    fn unbounded_polytope_rejected() {
        let a = SMatrix::<f64, 4, 2>::new(1.0, 0.0, 1.0, 0.1, 1.0, -0.1, 2.0, 0.0);
        let b = Vector4::new(1.0, 1.0, 1.0, 1.0);
        assert!(HalfspacePolytope::new(a, b).is_err());
    }

    #[test]
    fn general_polytope_rows_normalized() {
        let a = SMatrix::<f64, 4, 2>::new(2.0, 0.0, 0.0, 3.0, -1.0, 0.0, 0.0, -4.0);
        let b = Vector4::new(2.0, 3.0, 1.0, 4.0);
        let poly = HalfspacePolytope::new(a, b).unwrap();
        assert_eq!(poly.vertices().len(), 4);
        for i in 0..4 {
            assert_abs_diff_eq!(poly.b[i], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn axis_gap_distance() {
        let a = rect_to_polytope(&unit_square(0.0, 0.0, 0.0)).unwrap();
        let b = rect_to_polytope(&unit_square(3.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(polytope_distance(&a, &b), 2.0, epsilon = 1e-12);
        let c = rect_to_polytope(&unit_square(0.5, 0.0, 0.0)).unwrap();
        assert_eq!(polytope_distance(&a, &c), 0.0);
    }

    #[test]
    fn dca_examples() {
        let r = OrientedRect::from_extents(Pose2::new(0.0, 0.0, 0.0), 4.0, 2.0).unwrap();
        let d = dca_decompose(&r);
        assert_abs_diff_eq!(d.centers[0], Vec2::new(1.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(d.centers[1], Vec2::new(-1.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(d.radius, 2f64.sqrt(), epsilon = 1e-12);

        let s = OrientedRect::from_extents(Pose2::new(0.0, 0.0, 0.0), 2.0, 2.0).unwrap();
        let d = dca_decompose(&s);
        assert_abs_diff_eq!(d.centers[0].x.abs(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(d.radius, 1.118033988749895, epsilon = 1e-12);
    }

    #[test]
    fn disc_distance_examples() {
        let a = DiscPair { centers: [Vec2::new(0.0, 0.0), Vec2::new(-2.0, 0.0)], radius: 1.0 };
        let b = DiscPair { centers: [Vec2::new(5.0, 0.0), Vec2::new(7.0, 0.0)], radius: 1.0 };
        assert_abs_diff_eq!(min_disc_distance(&a, &b), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(min_disc_distance(&a, &a), -2.0, epsilon = 1e-12);
    }
}

//! Dense primal-dual interior-point method (Mehrotra predictor-corrector)
//! for `min 1/2 x^T Q x + c^T x  s.t.  G x <= h`. Rows are stored sparsely;
//! rows that are combinations of a shared dense basis (plus a few extra
//! entries) are registered as such, so their contribution to the normal
//! matrix costs one small congruence per basis instead of one dense outer
//! product per row.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{PisacError, Result};

#[derive(Debug, Clone, Default)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseRow {
    pub fn push(&mut self, i: usize, v: f64) {
        if v != 0.0 {
            self.idx.push(i);
            self.val.push(v);
        }
    }

    fn dot(&self, x: &DVector<f64>) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, v)| v * x[i]).sum()
    }
}

/// Row `coef^T B + extra`, where `B` (3 x L) spans the first `L` columns.
#[derive(Debug, Clone)]
struct Structured {
    basis: usize,
    coef: DVector<f64>,
    extra: SparseRow,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub rows: Vec<SparseRow>,
    pub h: Vec<f64>,
    bases: Vec<DMatrix<f64>>,
    structure: Vec<Option<Structured>>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub max_iters: usize,
    /// Relative residual and complementarity target.
    pub tol: f64,
    /// Accuracy at which the best iterate is still returned when the
    /// iteration limit is hit.
    pub fallback_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { max_iters: 60, tol: 1e-9, fallback_tol: 1e-6 }
    }
}

fn factor(kkt: &mut DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = kkt.clone().cholesky() {
        return Ok(c);
    }
    for i in 0..kkt.nrows() {
        kkt[(i, i)] += 1e-10 * (1.0 + kkt[(i, i)].abs());
    }
    kkt.clone().cholesky().ok_or_else(|| PisacError::Solver("QP normal matrix is singular".into()))
}

impl QpProblem {
    pub fn new(n: usize) -> Self {
        Self {
            q: DMatrix::zeros(n, n),
            c: DVector::zeros(n),
            rows: Vec::new(),
            h: Vec::new(),
            bases: Vec::new(),
            structure: Vec::new(),
        }
    }

    pub fn add_row(&mut self, row: SparseRow, rhs: f64) {
        self.rows.push(row);
        self.h.push(rhs);
        self.structure.push(None);
    }

    /// Registers a dense basis (3 x L, acting on the first L variables).
    pub fn add_basis(&mut self, basis: DMatrix<f64>) -> usize {
        assert!(basis.nrows() == 3 && basis.ncols() <= self.c.len(), "bases are 3 x L");
        self.bases.push(basis);
        self.bases.len() - 1
    }

    /// Adds the row `coef^T B + extra <= rhs` for a registered basis `B`.
    pub fn add_structured_row(&mut self, basis: usize, coef: DVector<f64>, extra: SparseRow, rhs: f64) {
        let b = &self.bases[basis];
        assert!(extra.idx.iter().all(|&i| i >= b.ncols()), "extra entries must lie outside the basis span");
        let dense = b.tr_mul(&coef);
        let mut row = SparseRow::default();
        for (j, &v) in dense.iter().enumerate() {
            row.push(j, v);
        }
        for (&i, &v) in extra.idx.iter().zip(&extra.val) {
            row.push(i, v);
        }
        self.rows.push(row);
        self.h.push(rhs);
        self.structure.push(Some(Structured { basis, coef, extra }));
    }

    /// `B x` for every basis, as 3-vectors.
    fn basis_products(&self, x: &DVector<f64>) -> Vec<[f64; 3]> {
        self.bases
            .iter()
            .map(|basis| {
                let b = basis.as_slice();
                let mut out = [0.0; 3];
                for j in 0..basis.ncols() {
                    for r in 0..3 {
                        out[r] += b[3 * j + r] * x[j];
                    }
                }
                out
            })
            .collect()
    }

    fn g_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let bx = self.basis_products(x);
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().zip(&self.structure).map(|(row, st)| match st {
                None => row.dot(x),
                Some(st) => {
                    let p = &bx[st.basis];
                    st.coef[0] * p[0] + st.coef[1] * p[1] + st.coef[2] * p[2] + st.extra.dot(x)
                }
            }),
        )
    }

    fn gt_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.c.len());
        let mut by = vec![[0.0; 3]; self.bases.len()];
        for ((row, st), &yi) in self.rows.iter().zip(&self.structure).zip(y.iter()) {
            let sparse = match st {
                None => row,
                Some(st) => {
                    for r in 0..3 {
                        by[st.basis][r] += yi * st.coef[r];
                    }
                    &st.extra
                }
            };
            for (&i, v) in sparse.idx.iter().zip(&sparse.val) {
                out[i] += v * yi;
            }
        }
        for (basis, v) in self.bases.iter().zip(&by) {
            let b = basis.as_slice();
            for j in 0..basis.ncols() {
                out[j] += b[3 * j] * v[0] + b[3 * j + 1] * v[1] + b[3 * j + 2] * v[2];
            }
        }
        out
    }

    /// `Q + G^T diag(w) G`. Accumulates the lower triangle, then mirrors.
    fn normal_matrix(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let n = self.c.len();
        let mut kkt = self.q.clone();
        let k = kkt.as_mut_slice();
        let mut acc: Vec<[f64; 9]> = vec![[0.0; 9]; self.bases.len()];
        // Cross terms between a basis and an extra column, kept in basis coordinates.
        let mut cross: Vec<Vec<(usize, [f64; 3])>> = vec![Vec::new(); self.bases.len()];
        for ((row, st), &wi) in self.rows.iter().zip(&self.structure).zip(w.iter()) {
            match st {
                None => {
                    for (a, &i) in row.idx.iter().enumerate() {
                        let vi = row.val[a] * wi;
                        for (b, &j) in row.idx.iter().enumerate() {
                            if i >= j {
                                k[i + j * n] += vi * row.val[b];
                            }
                        }
                    }
                }
                Some(st) => {
                    let c = &st.coef;
                    let m = &mut acc[st.basis];
                    for r in 0..3 {
                        for q in 0..3 {
                            m[r + 3 * q] += wi * c[r] * c[q];
                        }
                    }
                    for (&e, &v) in st.extra.idx.iter().zip(&st.extra.val) {
                        let list = &mut cross[st.basis];
                        let slot = match list.iter().position(|(f, _)| *f == e) {
                            Some(p) => p,
                            None => {
                                list.push((e, [0.0; 3]));
                                list.len() - 1
                            }
                        };
                        for r in 0..3 {
                            list[slot].1[r] += wi * v * c[r];
                        }
                        for (&f, &u) in st.extra.idx.iter().zip(&st.extra.val) {
                            if e >= f {
                                k[e + f * n] += wi * v * u;
                            }
                        }
                    }
                }
            }
        }
        for ((basis, m), cross) in self.bases.iter().zip(&acc).zip(&cross) {
            let l = basis.ncols();
            let b = basis.as_slice();
            // mb = M B, column-major 3 x l.
            let mut mb = vec![0.0; 3 * l];
            for j in 0..l {
                for r in 0..3 {
                    mb[r + 3 * j] = m[r] * b[3 * j] + m[r + 3] * b[3 * j + 1] + m[r + 6] * b[3 * j + 2];
                }
            }
            for j in 0..l {
                let mj = &mb[3 * j..3 * j + 3];
                let col = &mut k[j * n..j * n + l];
                for i in j..l {
                    col[i] += b[3 * i] * mj[0] + b[3 * i + 1] * mj[1] + b[3 * i + 2] * mj[2];
                }
            }
            for (e, v) in cross {
                for j in 0..l {
                    k[e + j * n] += b[3 * j] * v[0] + b[3 * j + 1] * v[1] + b[3 * j + 2] * v[2];
                }
            }
        }
        kkt.fill_upper_triangle_with_lower_triangle();
        kkt
    }

    pub fn solve(&self, settings: &QpSettings) -> Result<QpSolution> {
        let m = self.rows.len();
        let h = DVector::from_column_slice(&self.h);
        if m == 0 {
            let chol = self.q.clone().cholesky().ok_or_else(|| PisacError::Solver("QP Hessian not positive definite".into()))?;
            return Ok(QpSolution { x: chol.solve(&(-&self.c)), iterations: 1 });
        }
        // Starting point from the regularized problem with `G x + s = h`.
        let mut k0 = self.normal_matrix(&DVector::from_element(m, 1.0));
        let chol0 = factor(&mut k0)?;
        let mut x = chol0.solve(&(self.gt_mul(&h) - &self.c));
        let r0 = &h - self.g_mul(&x);
        let shift = |v: DVector<f64>| {
            let lo = v.min();
            if lo > 1e-8 {
                v
            } else {
                v.add_scalar(1.0 - lo)
            }
        };
        let mut s = shift(r0.clone());
        let mut z = shift(-r0);
        let scale_d = 1.0 + self.c.amax();
        let scale_p = 1.0 + h.amax();
        let mut best: Option<(f64, DVector<f64>)> = None;

        for iter in 0..settings.max_iters {
            let r_d = &self.q * &x + &self.c + self.gt_mul(&z);
            let r_p = self.g_mul(&x) + &s - &h;
            let mu = s.dot(&z) / m as f64;
            let err = (r_d.amax() / scale_d).max(r_p.amax() / scale_p).max(mu);
            if err <= settings.tol {
                return Ok(QpSolution { x, iterations: iter });
            }
            if best.as_ref().map_or(true, |(e, _)| err < *e) {
                best = Some((err, x.clone()));
            }
            let w = z.component_div(&s);
            let mut kkt = self.normal_matrix(&w);
            let kkt_full = kkt.clone();
            let chol = factor(&mut kkt)?;
            // One step of iterative refinement guards against the
            // ill-conditioning of the normal matrix near the optimum.
            let solve = |rhs: &DVector<f64>| {
                let dx = chol.solve(rhs);
                let resid = rhs - &kkt_full * &dx;
                dx + chol.solve(&resid)
            };
            let direction = |r_c: &DVector<f64>| {
                let t = (z.component_mul(&r_p) - r_c).component_div(&s);
                let dx = solve(&(-&r_d - self.gt_mul(&t)));
                let gdx = self.g_mul(&dx);
                let ds = -&r_p - &gdx;
                let dz = (-r_c + z.component_mul(&r_p) + z.component_mul(&gdx)).component_div(&s);
                (dx, ds, dz)
            };
            let max_step = |ds: &DVector<f64>, dz: &DVector<f64>| {
                let mut a: f64 = 1.0;
                for i in 0..m {
                    if ds[i] < 0.0 {
                        a = a.min(-s[i] / ds[i]);
                    }
                    if dz[i] < 0.0 {
                        a = a.min(-z[i] / dz[i]);
                    }
                }
                a
            };

            let r_c = s.component_mul(&z);
            let (_, ds_a, dz_a) = direction(&r_c);
            let a_aff = max_step(&ds_a, &dz_a);
            let mu_aff = (&s + &ds_a * a_aff).dot(&(&z + &dz_a * a_aff)) / m as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
            let r_c = r_c + ds_a.component_mul(&dz_a) - DVector::from_element(m, sigma * mu);
            let (dx, ds, dz) = direction(&r_c);
            let alpha = (0.99 * max_step(&ds, &dz)).min(1.0);
            x += &dx * alpha;
            s += &ds * alpha;
            z += &dz * alpha;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(PisacError::Solver("QP iterate diverged".into()));
            }
        }
        match best {
            Some((err, x)) if err <= settings.fallback_tol => Ok(QpSolution { x, iterations: settings.max_iters }),
            _ => Err(PisacError::Solver(format!("QP did not converge in {} iterations", settings.max_iters))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(entries: &[(usize, f64)]) -> SparseRow {
        let mut r = SparseRow::default();
        for &(i, v) in entries {
            r.push(i, v);
        }
        r
    }

    #[test]
    fn projection_onto_halfplane() {
        // min |x - (2, 2)|^2 s.t. x0 + x1 <= 1 -> (0.5, 0.5).
        let mut qp = QpProblem::new(2);
        qp.q = DMatrix::identity(2, 2) * 2.0;
        qp.c = DVector::from_vec(vec![-4.0, -4.0]);
        qp.add_row(row(&[(0, 1.0), (1, 1.0)]), 1.0);
        let sol = qp.solve(&QpSettings::default()).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.x[1], 0.5, epsilon = 1e-7);
    }

    #[test]
    fn box_and_linear_terms() {
        // min x0^2 + x1 s.t. -1 <= x1 <= 3, x0 >= 2 -> (2, -1).
        let mut qp = QpProblem::new(2);
        qp.q[(0, 0)] = 2.0;
        qp.q[(1, 1)] = 1e-9;
        qp.c = DVector::from_vec(vec![0.0, 1.0]);
        qp.add_row(row(&[(1, 1.0)]), 3.0);
        qp.add_row(row(&[(1, -1.0)]), 1.0);
        qp.add_row(row(&[(0, -1.0)]), -2.0);
        let sol = qp.solve(&QpSettings::default()).unwrap();
        assert_abs_diff_eq!(sol.x[0], 2.0, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.x[1], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn unconstrained() {
        let mut qp = QpProblem::new(1);
        qp.q[(0, 0)] = 4.0;
        qp.c[0] = -8.0;
        assert_abs_diff_eq!(qp.solve(&QpSettings::default()).unwrap().x[0], 2.0, epsilon = 1e-12);
    }
}

//! ISAC physical-layer statistics for one roadside unit serving K obstacle
//! vehicles: channel/reflection coefficients, ULA steering vectors, the
//! angle/delay measurement model, Fisher information, the position CRB and
//! a linearized maximum-likelihood position estimator.
//!
//! Every power-dependent quantity scales as `1/p`, so the CRB is stored as
//! the unit-power matrix `C` and evaluated as `C / p`.

use nalgebra::{DVector, Matrix2};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{PisacError, Result};
use crate::geometry::Vec2;

/// Roadside unit and link-level constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsuConfig {
    pub position: [f64; 2],
    pub n_tx: usize,
    pub n_rx: usize,
    /// Radar receiver noise variance.
    pub sigma_r2: f64,
    /// Communication receiver noise variance.
    pub sigma_c2: f64,
    /// Matched-filtering gain.
    pub filter_gain: f64,
    pub a1: f64,
    pub a2: f64,
    /// Complex radar cross section.
    pub xi: Complex64,
    /// Reference path loss at unit distance.
    pub alpha_ref: f64,
    pub carrier_freq_hz: f64,
    pub lightspeed: f64,
}

impl Default for RsuConfig {
    fn default() -> Self {
        Self {
            position: [380.0, 38.5],
            n_tx: 64,
            n_rx: 64,
            sigma_r2: 1.0,
            sigma_c2: 1.0,
            filter_gain: 10.0,
            a1: 6.7e-5,
            a2: 1.0,
            xi: Complex64::new(1.0, 1.0),
            alpha_ref: 1.0,
            carrier_freq_hz: 5.9e9,
            lightspeed: 3.0e8,
        }
    }
}

impl RsuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.n_rx == 0 {
            return Err(PisacError::Config("antenna counts must be at least 1".into()));
        }
        let positive = [
            ("sigma_r2", self.sigma_r2),
            ("sigma_c2", self.sigma_c2),
            ("filter_gain", self.filter_gain),
            ("alpha_ref", self.alpha_ref),
            ("lightspeed", self.lightspeed),
            ("a1", self.a1),
            ("a2", self.a2),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PisacError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.xi.norm() > 0.0) {
            return Err(PisacError::Config("radar cross section must be nonzero".into()));
        }
        Ok(())
    }

    pub fn origin(&self) -> Vec2 {
        Vec2::new(self.position[0], self.position[1])
    }

    /// Radar array gain sqrt(N_t N_r).
    pub fn kappa_r(&self) -> f64 {
        ((self.n_tx * self.n_rx) as f64).sqrt()
    }

    /// Communication array gain sqrt(N_t).
    pub fn kappa_c(&self) -> f64 {
        (self.n_tx as f64).sqrt()
    }

    /// Total transmit power for a transmit SNR `P_sum / sigma_R^2` in dB.
    pub fn power_budget(&self, snr_db: f64) -> f64 {
        self.sigma_r2 * 10f64.powf(snr_db / 10.0)
    }
}

/// Target position in RSU-centred polar coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarState {
    pub theta: f64,
    pub dist: f64,
}

pub fn polar_from_cartesian(ov_pos: &Vec2, rsu: &RsuConfig) -> Result<PolarState> {
    let rel = ov_pos - rsu.origin();
    let dist = rel.norm();
    if !(dist > 1e-9) {
        return Err(PisacError::DegenerateGeometry("target coincides with the RSU".into()));
    }
    Ok(PolarState { theta: rel.y.atan2(rel.x), dist })
}

pub fn cartesian_from_polar(polar: &PolarState, rsu: &RsuConfig) -> Vec2 {
    rsu.origin() + Vec2::new(polar.dist * polar.theta.cos(), polar.dist * polar.theta.sin())
}

/// Jacobian of (theta, d) with respect to (x, y), rows indexed by the polar
/// coordinates.
pub fn polar_jacobian(polar: &PolarState) -> Matrix2<f64> {
    let (s, c) = polar.theta.sin_cos();
    let d = polar.dist;
    Matrix2::new(-s / d, c / d, c, s)
}

/// |alpha_k|^2 = alpha_ref^2 / d^2; the carrier phase drops out.
pub fn channel_gain(polar: &PolarState, rsu: &RsuConfig) -> f64 {
    (rsu.alpha_ref / polar.dist).powi(2)
}

/// beta_k = xi / (2 d).
pub fn reflection_coeff(polar: &PolarState, rsu: &RsuConfig) -> Complex64 {
    rsu.xi / (2.0 * polar.dist)
}

/// Normalized downlink SNR per watt, kappa_C^2 |alpha|^2 delta^2 / sigma_C^2.
pub fn comm_gain(polar: &PolarState, rsu: &RsuConfig, delta: f64) -> f64 {
    rsu.kappa_c().powi(2) * channel_gain(polar, rsu) * delta * delta / rsu.sigma_c2
}

/// Angle and delay measurement-noise variances at beam power `p`.
pub fn noise_variances(polar: &PolarState, p: f64, rsu: &RsuConfig, delta: f64) -> Result<(f64, f64)> {
    if !(p > 0.0) {
        return Err(PisacError::InvalidPower(p));
    }
    if !(delta > 0.0) {
        return Err(PisacError::EstimationDegenerate(format!("beam gain must be positive, got {delta}")));
    }
    let beta2 = reflection_coeff(polar, rsu).norm_sqr();
    let var_theta = rsu.a2 * rsu.a2 * rsu.sigma_r2 / (rsu.filter_gain * p);
    let var_tau = rsu.a1 * rsu.a1 * rsu.sigma_r2
        / (rsu.filter_gain * rsu.kappa_r().powi(2) * beta2 * delta * delta * p);
    Ok((var_theta, var_tau))
}

/// Unit-norm half-wavelength ULA response, element n = exp(j pi n sin theta).
pub fn steering_vector(theta: f64, n: usize) -> DVector<Complex64> {
    let scale = 1.0 / (n as f64).sqrt();
    let s = theta.sin();
    DVector::from_fn(n, |i, _| Complex64::from_polar(scale, PI * i as f64 * s))
}

/// Derivative of [`steering_vector`] with respect to theta.
pub fn steering_vector_derivative(theta: f64, n: usize) -> DVector<Complex64> {
    let c = theta.cos();
    steering_vector(theta, n)
        .iter()
        .enumerate()
        .map(|(i, b)| b * Complex64::new(0.0, PI * i as f64 * c))
        .collect::<Vec<_>>()
        .into()
}

/// Noiseless measurement `g(w) = [kappa_R beta delta b(theta); 2 d / c]` and
/// its linearization.
#[derive(Debug, Clone, Copy)]
pub struct MeasurementModel<'a> {
    pub rsu: &'a RsuConfig,
    pub delta: f64,
}

impl<'a> MeasurementModel<'a> {
    pub fn new(rsu: &'a RsuConfig, delta: f64) -> Self {
        Self { rsu, delta }
    }

    pub fn len(&self) -> usize {
        self.rsu.n_rx + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn evaluate(&self, w: &PolarState) -> DVector<Complex64> {
        let n = self.rsu.n_rx;
        let amp = reflection_coeff(w, self.rsu) * (self.rsu.kappa_r() * self.delta);
        let b = steering_vector(w.theta, n);
        let mut g = DVector::from_element(n + 1, Complex64::new(0.0, 0.0));
        for i in 0..n {
            g[i] = amp * b[i];
        }
        g[n] = Complex64::new(2.0 * w.dist / self.rsu.lightspeed, 0.0);
        g
    }

    /// Columns d g / d theta and d g / d d.
    pub fn jacobian(&self, w: &PolarState) -> (DVector<Complex64>, DVector<Complex64>) {
        let n = self.rsu.n_rx;
        let amp = reflection_coeff(w, self.rsu) * (self.rsu.kappa_r() * self.delta);
        let b = steering_vector(w.theta, n);
        let db = steering_vector_derivative(w.theta, n);
        let mut u_theta = DVector::from_element(n + 1, Complex64::new(0.0, 0.0));
        let mut u_dist = u_theta.clone();
        for i in 0..n {
            u_theta[i] = amp * db[i];
            u_dist[i] = -amp * b[i] / w.dist;
        }
        u_dist[n] = Complex64::new(2.0 / self.rsu.lightspeed, 0.0);
        (u_theta, u_dist)
    }

    /// Per-entry noise variances of the stacked measurement at power `p`.
    pub fn noise_diag(&self, w: &PolarState, p: f64) -> Result<DVector<f64>> {
        let (vt, vd) = noise_variances(w, p, self.rsu, self.delta)?;
        let n = self.rsu.n_rx;
        Ok(DVector::from_fn(n + 1, |i, _| if i < n { vt } else { vd }))
    }

    /// Real Fisher information of (theta, d) at power `p`,
    /// `2 Re(U^H Q^-1 U)` for circular complex Gaussian noise.
    pub fn fisher_information(&self, w: &PolarState, p: f64) -> Result<Matrix2<f64>> {
        let q = self.noise_diag(w, p)?;
        let (ut, ud) = self.jacobian(w);
        let mut j = Matrix2::zeros();
        for i in 0..q.len() {
            let inv = 1.0 / q[i];
            j[(0, 0)] += ut[i].norm_sqr() * inv;
            j[(1, 1)] += ud[i].norm_sqr() * inv;
            j[(0, 1)] += (ut[i].conj() * ud[i]).re * inv;
        }
        j[(1, 0)] = j[(0, 1)];
        Ok(j * 2.0)
    }
}

/// Unit-power CRB matrix of the cartesian position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrbModel {
    pub c11: f64,
    pub c22: f64,
    pub full_matrix: Matrix2<f64>,
}

impl CrbModel {
    pub fn from_matrix(full_matrix: Matrix2<f64>) -> Self {
        Self { c11: full_matrix[(0, 0)], c22: full_matrix[(1, 1)], full_matrix }
    }

    /// CRB at beam power `p`.
    pub fn at_power(&self, p: f64) -> Matrix2<f64> {
        self.full_matrix / p
    }

    pub fn trace(&self) -> f64 {
        self.c11 + self.c22
    }
}

fn check_fim(j: &Matrix2<f64>, what: &str) -> Result<()> {
    let (a, d) = (j[(0, 0)], j[(1, 1)]);
    let finite = j.iter().all(|v| v.is_finite());
    if !finite || !(a > 0.0) || !(d > 0.0) || !(j.determinant() > 1e-12 * a * d) {
        return Err(PisacError::EstimationDegenerate(format!("{what} Fisher information is singular")));
    }
    Ok(())
}

/// CRB model at a target: `C = [A^T J~ A]^-1` with `A = d(theta, d)/d(x, y)`
/// and `J~` the unit-power polar Fisher information.
pub fn crb_matrix(polar: &PolarState, rsu: &RsuConfig, delta: f64) -> Result<CrbModel> {
    let model = MeasurementModel::new(rsu, delta);
    let jw = model.fisher_information(polar, 1.0)?;
    // Angle information vanishes at endfire or with a single receive element;
    // compare against its broadside value at the same range.
    let n = rsu.n_rx as f64;
    let broadside = 2.0 * (rsu.kappa_r() * delta).powi(2) * reflection_coeff(polar, rsu).norm_sqr()
        * PI * PI * (n - 1.0) * (2.0 * n - 1.0) / 6.0
        / noise_variances(polar, 1.0, rsu, delta)?.0;
    if !(jw[(0, 0)] > 1e-12 * broadside) {
        return Err(PisacError::EstimationDegenerate("angle information vanishes".into()));
    }
    check_fim(&jw, "polar")?;
    let a = polar_jacobian(polar);
    let js = a.transpose() * jw * a;
    check_fim(&js, "cartesian")?;
    let c = js
        .try_inverse()
        .ok_or_else(|| PisacError::EstimationDegenerate("cartesian FIM not invertible".into()))?;
    let c = (c + c.transpose()) * 0.5;
    Ok(CrbModel::from_matrix(c))
}

/// Diagonal sensing covariance `diag(c11, c22) / p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingCovariance {
    pub sigma: Matrix2<f64>,
}

impl SensingCovariance {
    pub fn var_x(&self) -> f64 {
        self.sigma[(0, 0)]
    }

    pub fn var_y(&self) -> f64 {
        self.sigma[(1, 1)]
    }

    pub fn trace(&self) -> f64 {
        self.sigma.trace()
    }
}

pub fn sensing_covariance(crb: &CrbModel, p: f64) -> Result<SensingCovariance> {
    if !(p > 0.0) {
        return Err(PisacError::InvalidPower(p));
    }
    Ok(SensingCovariance { sigma: Matrix2::new(crb.c11 / p, 0.0, 0.0, crb.c22 / p) })
}

/// Downlink sum rate in bits/s/Hz for normalized gains (see [`comm_gain`]).
pub fn sum_rate(powers: &[f64], gains: &[f64]) -> f64 {
    powers
        .iter()
        .zip(gains)
        .map(|(p, g)| (1.0 + p.max(0.0) * g).log2())
        .sum()
}

/// Draws `r = g(w) + z` with `z ~ CN(0, Q)`; `noise_scale` multiplies the
/// noise standard deviation (0 gives the noiseless measurement).
pub fn draw_measurement<R: Rng + ?Sized>(
    w_true: &PolarState,
    p: f64,
    rsu: &RsuConfig,
    delta: f64,
    noise_scale: f64,
    rng: &mut R,
) -> Result<DVector<Complex64>> {
    let model = MeasurementModel::new(rsu, delta);
    let q = model.noise_diag(w_true, p)?;
    let mut r = model.evaluate(w_true);
    for i in 0..r.len() {
        let sd = noise_scale * (0.5 * q[i]).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        r[i] += Complex64::new(sd * re, sd * im);
    }
    Ok(r)
}

/// Weighted least squares on the measurement linearized at `w_pre`:
/// `w = w_pre + (Re U^H Q^-1 U)^-1 Re U^H Q^-1 (r - g(w_pre))`.
pub fn linearized_mle(
    r: &DVector<Complex64>,
    w_pre: &PolarState,
    p: f64,
    rsu: &RsuConfig,
    delta: f64,
) -> Result<PolarState> {
    let model = MeasurementModel::new(rsu, delta);
    let q = model.noise_diag(w_pre, p)?;
    let (ut, ud) = model.jacobian(w_pre);
    let resid = r - model.evaluate(w_pre);
    let mut m = Matrix2::zeros();
    let mut rhs = nalgebra::Vector2::zeros();
    for i in 0..q.len() {
        let inv = 1.0 / q[i];
        m[(0, 0)] += ut[i].norm_sqr() * inv;
        m[(1, 1)] += ud[i].norm_sqr() * inv;
        m[(0, 1)] += (ut[i].conj() * ud[i]).re * inv;
        rhs[0] += (ut[i].conj() * resid[i]).re * inv;
        rhs[1] += (ud[i].conj() * resid[i]).re * inv;
    }
    m[(1, 0)] = m[(0, 1)];
    let step = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| PisacError::EstimationDegenerate("normal equations singular".into()))?;
    let dist = w_pre.dist + step[1];
    if !(dist > 0.0) || !step.iter().all(|v: &f64| v.is_finite()) {
        return Err(PisacError::EstimationDegenerate("estimate left the valid range".into()));
    }
    Ok(PolarState { theta: w_pre.theta + step[0], dist })
}

/// Seeded single-shot estimate of the target position, linearized at the
/// true state.
pub fn mle_sample(polar_true: &PolarState, p: f64, rsu: &RsuConfig, rng_seed: u64) -> Result<Vec2> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = draw_measurement(polar_true, p, rsu, 1.0, 1.0, &mut rng)?;
    let w = linearized_mle(&r, polar_true, p, rsu, 1.0)?;
    Ok(cartesian_from_polar(&w, rsu))
}

/// Repeated estimates from one random stream; the fast path for
/// Monte-Carlo studies.
pub fn mle_samples<R: Rng + ?Sized>(
    polar_true: &PolarState,
    p: f64,
    rsu: &RsuConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec2>> {
    (0..count)
        .map(|_| {
            let r = draw_measurement(polar_true, p, rsu, 1.0, 1.0, rng)?;
            let w = linearized_mle(&r, polar_true, p, rsu, 1.0)?;
            Ok(cartesian_from_polar(&w, rsu))
        })
        .collect()
}

//! Per-target Gaussian beliefs in information form.
//!
//! Prediction follows the linear Gaussian target model. Two measurement
//! updates coexist: the hard update consumes an actual measurement when the
//! target is geometrically inside the footprint (evaluation), and the smooth
//! update adds the probit-weighted information gain without any measurement
//! (training and planning).

use crate::error::{Error, Result};
use crate::fov::{body_frame, probit, signed_distance, zeta, FovShape, ProbitParams};
use crate::liegroup::Pose;
use nalgebra::{Cholesky, DMatrix, DVector};

/// Positive-definiteness floor for information matrices.
const EIG_FLOOR: f64 = 1e-12;

/// Gaussian target belief: mean vector and information (inverse covariance)
/// matrix. Serves as both prior and posterior depending on position in the
/// filter cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBelief {
    pub mean: DVector<f64>,
    pub info: DMatrix<f64>,
}

impl TargetBelief {
    pub fn new(mean: DVector<f64>, info: DMatrix<f64>) -> Self {
        let mut b = TargetBelief { mean, info };
        b.enforce_invariants();
        b
    }

    /// Isotropic belief `info = scale * I`.
    pub fn isotropic(mean: DVector<f64>, scale: f64) -> Self {
        let n = mean.len();
        TargetBelief::new(mean, DMatrix::identity(n, n) * scale)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// log det of the information matrix.
    pub fn logdet_info(&self) -> Result<f64> {
        logdet_spd(&self.info)
    }

    /// Symmetrizes and, if the smallest eigenvalue dips below the floor,
    /// adds a jitter multiple of identity.
    fn enforce_invariants(&mut self) {
        let sym = (&self.info + self.info.transpose()) * 0.5;
        self.info = sym;
        let min_eig = self
            .info
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig <= EIG_FLOOR {
            let n = self.dim();
            self.info += DMatrix::identity(n, n) * EIG_FLOOR;
        }
    }

    /// Frobenius asymmetry, for invariant checks.
    pub fn asymmetry(&self) -> f64 {
        (&self.info - self.info.transpose()).norm()
    }
}

/// Linear Gaussian target model `y' = A y + B xi + w`, `z = H y + eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub v: DMatrix<f64>,
    sensor_info: DMatrix<f64>,
}

impl TargetModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        w: DMatrix<f64>,
        h: DMatrix<f64>,
        v: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || w.nrows() != n || w.ncols() != n || b.nrows() != n {
            return Err(Error::InvalidConfig("target model dimensions are inconsistent".into()));
        }
        if h.ncols() != n || v.nrows() != h.nrows() || v.ncols() != h.nrows() {
            return Err(Error::InvalidConfig("sensor model dimensions are inconsistent".into()));
        }
        for (name, m) in [("W", &w), ("V", &v)] {
            if (m - m.transpose()).norm() > 1e-9 {
                return Err(Error::InvalidConfig(format!("{name} must be symmetric")));
            }
        }
        let v_inv = Cholesky::new(v.clone())
            .ok_or_else(|| Error::InvalidConfig("V must be positive definite".into()))?
            .inverse();
        let sensor_info = h.transpose() * v_inv * &h;
        Ok(TargetModel { a, b, w, h, v, sensor_info })
    }

    /// Planar instance: `A = B = H = I2`, `W = sigma_motion^2 I`,
    /// `V = sigma_sensor^2 I`.
    pub fn planar(sigma_sensor: f64, sigma_motion: f64) -> Result<Self> {
        let i = DMatrix::identity(2, 2);
        TargetModel::new(
            i.clone(),
            i.clone(),
            &i * sigma_motion.powi(2),
            i.clone(),
            &i * sigma_sensor.powi(2),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn measurement_dim(&self) -> usize {
        self.h.nrows()
    }

    /// `H^T V^-1 H`, the information added by one full-weight measurement.
    pub fn sensor_info(&self) -> &DMatrix<f64> {
        &self.sensor_info
    }
}

/// Kalman prediction in information form: mean `A mu + B xi`, information
/// `(A Y^-1 A^T + W)^-1`.
pub fn predict(b: &TargetBelief, xi: &DVector<f64>, m: &TargetModel) -> Result<TargetBelief> {
    predict_with_gain(b, xi, m).map(|(prior, _)| prior)
}

/// Prediction that also returns the dissipation factor `F = P' A Y^-1`
/// used by the information-perturbation recursion: the predicted
/// information perturbation is `F Omega F^T`.
pub fn predict_with_gain(
    b: &TargetBelief,
    xi: &DVector<f64>,
    m: &TargetModel,
) -> Result<(TargetBelief, DMatrix<f64>)> {
    let chol = Cholesky::new(b.info.clone()).ok_or(Error::SingularInfo)?;
    // X = Y^-1 A^T, so the predicted covariance is A X + W.
    let x = chol.solve(&m.a.transpose());
    let mut cov = &m.a * &x + &m.w;
    cov = (&cov + cov.transpose()) * 0.5;
    let p = Cholesky::new(cov).ok_or(Error::SingularInfo)?.inverse();
    let gain = &p * x.transpose();
    let mean = &m.a * &b.mean + &m.b * xi;
    Ok((TargetBelief::new(mean, p), gain))
}

/// Probit information weight `1 - phi(d)` of a target at `p_mean` seen from
/// pose `t`, plus the signed distance it was evaluated at.
pub fn info_weight(
    t: &Pose,
    p_mean: &DVector<f64>,
    shape: &FovShape,
    probit_params: &ProbitParams,
) -> (f64, f64) {
    let q = body_frame(t, &zeta(p_mean));
    let (d, _) = signed_distance(&q, shape);
    (1.0 - probit(d, probit_params), d)
}

/// Differentiable information gain `M = (1 - phi(d)) H^T V^-1 H`.
pub fn info_gain(
    t: &Pose,
    p_mean: &DVector<f64>,
    m: &TargetModel,
    shape: &FovShape,
    probit_params: &ProbitParams,
) -> DMatrix<f64> {
    let (weight, _) = info_weight(t, p_mean, shape, probit_params);
    m.sensor_info() * weight
}

/// Measurement-free update: posterior information `P + M`, mean unchanged.
pub fn smooth_update(
    prior: &TargetBelief,
    t: &Pose,
    m: &TargetModel,
    shape: &FovShape,
    probit_params: &ProbitParams,
) -> TargetBelief {
    let gain = info_gain(t, &prior.mean, m, shape, probit_params);
    TargetBelief::new(prior.mean.clone(), &prior.info + gain)
}

/// Measurement update for a target inside the hard footprint: Kalman-gain
/// mean correction and additive information `P + H^T V^-1 H`.
pub fn hard_update(prior: &TargetBelief, z: &DVector<f64>, m: &TargetModel) -> Result<TargetBelief> {
    let cov = Cholesky::new(prior.info.clone()).ok_or(Error::SingularInfo)?.inverse();
    let innovation_cov = &m.h * &cov * m.h.transpose() + &m.v;
    let chol = Cholesky::new(innovation_cov).ok_or(Error::SingularInnovation)?;
    // K = Sigma H^T S^-1, applied as a solve against the innovation.
    let innovation = z - &m.h * &prior.mean;
    let mean = &prior.mean + &cov * m.h.transpose() * chol.solve(&innovation);
    let info = &prior.info + m.sensor_info();
    Ok(TargetBelief::new(mean, info))
}

/// log det of a symmetric positive definite matrix via Cholesky.
pub fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(m.clone()).ok_or(Error::SingularInfo)?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

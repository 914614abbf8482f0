//! SE(3) primitives: hat/vee, exponential and logarithm maps, and the
//! derivative of the exponential with respect to twist coordinates.
//!
//! Twists are ordered `[v, w]`: linear velocity first, angular velocity
//! last. Planar problems are embedded in SE(3) with z, roll, and pitch
//! identically zero, so one math core serves both cases.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};

/// Body twist `[v, w]` in m/s and rad/s.
pub type Twist = Vector6<f64>;

/// Frobenius drift of `R^T R` from identity above which a pose is
/// re-orthonormalized.
const ORTHONORMALITY_TOL: f64 = 1e-9;

/// Rotation angles within this distance of pi are rejected by [`logmap`].
const ANGLE_NEAR_PI_TOL: f64 = 1e-6;

/// Rigid-body pose as a 4x4 homogeneous transform.
///
/// The rotation block is kept orthonormal (polar re-projection whenever the
/// drift exceeds 1e-9) and the bottom row is exactly `[0, 0, 0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    m: Matrix4<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { m: Matrix4::identity() }
    }

    /// Builds a pose from a raw homogeneous matrix, restoring the invariants.
    pub fn from_matrix(m: Matrix4<f64>) -> Self {
        let mut p = Pose { m };
        p.normalize();
        p
    }

    /// Planar pose embedded in SE(3): translation `(x, y, 0)`, yaw about z.
    pub fn from_planar(x: f64, y: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let mut m = Matrix4::identity();
        m[(0, 0)] = c;
        m[(0, 1)] = -s;
        m[(1, 0)] = s;
        m[(1, 1)] = c;
        m[(0, 3)] = x;
        m[(1, 3)] = y;
        Pose { m }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.m.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `(x, y, yaw)` of the planar embedding.
    pub fn planar(&self) -> (f64, f64, f64) {
        (self.m[(0, 3)], self.m[(1, 3)], self.m[(1, 0)].atan2(self.m[(0, 0)]))
    }

    /// Group composition; re-orthonormalizes if accumulated drift exceeds
    /// the tolerance.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut p = Pose { m: self.m * other.m };
        p.normalize();
        p
    }

    /// Analytic inverse `[R^T, -R^T x]`.
    pub fn inverse(&self) -> Pose {
        let r_t = self.rotation().transpose();
        let t = -(r_t * self.translation());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_t);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose { m }
    }

    /// Frobenius norm of `R^T R - I`.
    pub fn orthonormality_drift(&self) -> f64 {
        let r = self.rotation();
        (r.transpose() * r - Matrix3::identity()).norm()
    }

    fn normalize(&mut self) {
        self.m[(3, 0)] = 0.0;
        self.m[(3, 1)] = 0.0;
        self.m[(3, 2)] = 0.0;
        self.m[(3, 3)] = 1.0;
        if self.orthonormality_drift() > ORTHONORMALITY_TOL {
            // Nearest rotation by polar decomposition.
            let r = self.rotation();
            let svd = r.svd(true, true);
            let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
            let mut r_fixed = u * v_t;
            if r_fixed.determinant() < 0.0 {
                let mut u_flip = u;
                u_flip.column_mut(2).neg_mut();
                r_fixed = u_flip * v_t;
            }
            self.m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_fixed);
        }
    }
}

/// Skew-symmetric matrix of a 3-vector.
pub fn hat3(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

/// se(3) matrix of a twist: skew block from the angular part, linear part in
/// the last column, zero bottom row.
pub fn hat(u: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&hat3(&Vector3::new(u[3], u[4], u[5])));
    m[(0, 3)] = u[0];
    m[(1, 3)] = u[1];
    m[(2, 3)] = u[2];
    m
}

/// Inverse of [`hat`]; averages the skew components so nearly-skew inputs
/// map to the closest algebra element.
pub fn vee(m: &Matrix4<f64>) -> Twist {
    Vector6::new(
        m[(0, 3)],
        m[(1, 3)],
        m[(2, 3)],
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

// Scalar coefficients of the Rodrigues and Jacobian formulas, with series
// branches placed where the direct expressions lose precision to
// cancellation (well above the 1e-8 scale where they become 0/0).

/// sin(t)/t.
fn sinc(t: f64) -> f64 {
    if t.abs() < 1e-4 {
        let t2 = t * t;
        1.0 - t2 / 6.0 + t2 * t2 / 120.0
    } else {
        t.sin() / t
    }
}

/// (1 - cos(t))/t^2, evaluated cancellation-free via the half-angle sine.
fn one_minus_cos_over_sq(t: f64) -> f64 {
    let s = sinc(0.5 * t);
    0.5 * s * s
}

/// (t - sin(t))/t^3.
fn t_minus_sin_over_cube(t: f64) -> f64 {
    if t.abs() < 1e-2 {
        let t2 = t * t;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (t - t.sin()) / (t * t * t)
    }
}

/// (1 - t^2/2 - cos(t))/t^4.
fn q_coeff_a(t: f64) -> f64 {
    if t.abs() < 0.1 {
        let t2 = t * t;
        -1.0 / 24.0 + t2 / 720.0 - t2 * t2 / 40320.0
    } else {
        let t2 = t * t;
        (1.0 - 0.5 * t2 - t.cos()) / (t2 * t2)
    }
}

/// (t - sin(t) - t^3/6)/t^5.
fn q_coeff_b(t: f64) -> f64 {
    if t.abs() < 0.1 {
        let t2 = t * t;
        -1.0 / 120.0 + t2 / 5040.0 - t2 * t2 / 362880.0
    } else {
        (t - t.sin() - t * t * t / 6.0) / (t * t * t * t * t)
    }
}

/// SO(3) exponential by the Rodrigues formula.
fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat3(phi);
    Matrix3::identity() + sinc(theta) * k + one_minus_cos_over_sq(theta) * (k * k)
}

/// SO(3) left Jacobian; also couples rotation into translation in the SE(3)
/// exponential.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat3(phi);
    Matrix3::identity() + one_minus_cos_over_sq(theta) * k + t_minus_sin_over_cube(theta) * (k * k)
}

/// Closed-form SE(3) exponential of a twist scaled by `tau`.
pub fn expmap(u: &Twist, tau: f64) -> Pose {
    let v = Vector3::new(u[0], u[1], u[2]) * tau;
    let phi = Vector3::new(u[3], u[4], u[5]) * tau;
    let r = so3_exp(&phi);
    let t = so3_left_jacobian(&phi) * v;
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    Pose::from_matrix(m)
}

/// Rotation angle of `R` via atan2 of the skew and trace parts, accurate for
/// small angles where acos of the trace is not.
fn so3_angle(r: &Matrix3<f64>) -> f64 {
    let skew = Vector3::new(
        0.5 * (r[(2, 1)] - r[(1, 2)]),
        0.5 * (r[(0, 2)] - r[(2, 0)]),
        0.5 * (r[(1, 0)] - r[(0, 1)]),
    );
    let cos = 0.5 * (r.trace() - 1.0);
    skew.norm().atan2(cos)
}

/// SE(3) logarithm; the returned twist satisfies `expmap(u, 1) == T`.
///
/// Fails with [`Error::AngleNearPi`] when the rotation angle is within 1e-6
/// of pi, where the logarithm is multivalued.
pub fn logmap(t: &Pose) -> Result<Twist> {
    let r = t.rotation();
    let theta = so3_angle(&r);
    if theta > std::f64::consts::PI - ANGLE_NEAR_PI_TOL {
        return Err(Error::AngleNearPi);
    }
    let skew = Vector3::new(
        0.5 * (r[(2, 1)] - r[(1, 2)]),
        0.5 * (r[(0, 2)] - r[(2, 0)]),
        0.5 * (r[(1, 0)] - r[(0, 1)]),
    );
    let phi = skew / sinc(theta);
    // Translation coordinates solve J_l(phi) rho = x; J_l is well conditioned
    // on the admissible domain.
    let rho = so3_left_jacobian(&phi)
        .lu()
        .solve(&t.translation())
        .expect("left Jacobian is invertible below pi");
    Ok(Vector6::new(rho[0], rho[1], rho[2], phi[0], phi[1], phi[2]))
}

/// Translation-rotation coupling block of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let rx = hat3(rho);
    let px = hat3(phi);
    let m2 = t_minus_sin_over_cube(theta);
    let a = q_coeff_a(theta);
    let b = q_coeff_b(theta);

    let px_rx = px * rx;
    let rx_px = rx * px;
    let px_rx_px = px_rx * px;

    0.5 * rx + m2 * (px_rx + rx_px + px_rx_px)
        - a * (px * px_rx + rx_px * px - 3.0 * px_rx_px)
        - 0.5 * (a - 3.0 * b) * (px_rx_px * px + px * px_rx_px)
}

/// SE(3) left Jacobian in `[v, w]` twist ordering.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let phi = Vector3::new(xi[3], xi[4], xi[5]);
    let jl = so3_left_jacobian(&phi);
    let q = se3_q_block(&rho, &phi);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    j
}

/// SE(3) right Jacobian: `J_r(xi) = J_l(-xi)`.
pub fn se3_right_jacobian(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian(&(-xi))
}

/// Derivative of `expmap(u, tau)` with respect to the twist coordinate
/// `axis` (0-based), via the right-Jacobian relation
/// `exp(tau u^) (tau J_r(tau u) e_axis)^`.
pub fn dexp_du(u: &Twist, tau: f64, axis: usize) -> Matrix4<f64> {
    assert!(axis < 6, "twist coordinate index out of range");
    dexp_all(u, tau)[axis]
}

/// All six twist-coordinate derivatives of `expmap(u, tau)` at once, sharing
/// one exponential and one right Jacobian.
pub fn dexp_all(u: &Twist, tau: f64) -> [Matrix4<f64>; 6] {
    let e = expmap(u, tau);
    let jr = se3_right_jacobian(&(tau * u));
    let mut out = [Matrix4::zeros(); 6];
    for (j, d) in out.iter_mut().enumerate() {
        let col: Vector6<f64> = tau * jr.column(j);
        *d = e.matrix() * hat(&col);
    }
    out
}

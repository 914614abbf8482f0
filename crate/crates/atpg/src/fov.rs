//! Field-of-view geometry and its smooth relaxation.
//!
//! The sensor footprint is a triangle in the body frame: apex at the body
//! origin, axis along body +x, truncated by a far edge at `x = depth`. The
//! signed distance to the footprint is negative inside and positive outside,
//! and the probit of that distance produces the differentiable information
//! weight `1 - phi(d)`.
//!
//! Note the offset in the probit argument: `phi(x) = (1 + erf(x/(sqrt(2) k)
//! - 2))/2`, so the weight at the boundary (`d = 0`) is about 0.9977 rather
//! than 0.5. Information stays nearly full at the footprint edge and decays
//! outward over a few multiples of `kappa`.

use crate::error::{Error, Result};
use crate::liegroup::Pose;
use nalgebra::{DVector, Vector3};

/// Sensor footprint shape in the agent body frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum FovShape {
    /// Planar triangle: apex at the origin, axis along +x, opening
    /// half-angle, truncated at `depth`. The z coordinate is ignored.
    Triangle2d { depth: f64, half_angle: f64 },
}

impl FovShape {
    pub fn triangle2d(depth: f64, half_angle: f64) -> Result<Self> {
        if !(depth > 0.0) {
            return Err(Error::InvalidConfig(format!("fov depth must be positive, got {depth}")));
        }
        if !(half_angle > 0.0 && half_angle < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidConfig(format!(
                "fov half-angle must lie in (0, pi/2), got {half_angle}"
            )));
        }
        Ok(FovShape::Triangle2d { depth, half_angle })
    }
}

/// Smoothing factor of the probit relaxation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbitParams {
    pub kappa: f64,
}

impl ProbitParams {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::InvalidConfig(format!("kappa must be positive, got {kappa}")));
        }
        Ok(ProbitParams { kappa })
    }
}

/// Maps a target state to its 3-D location: the first two components are
/// planar position, z is zero. States carrying extra coordinates (e.g.
/// velocities) are projected onto the leading position block.
pub fn zeta(y: &DVector<f64>) -> Vector3<f64> {
    debug_assert!(y.len() >= 2, "target state must carry at least a planar position");
    Vector3::new(y[0], y[1], 0.0)
}

/// Body-frame coordinates of a world point: `R^T (zeta - x)`.
pub fn body_frame(t: &Pose, zeta: &Vector3<f64>) -> Vector3<f64> {
    t.rotation().transpose() * (zeta - t.translation())
}

/// Closest point on a planar segment and the squared distance to it.
fn segment_closest(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> ((f64, f64), f64) {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0);
    let c = (a.0 + t * ab.0, a.1 + t * ab.1);
    let d = (p.0 - c.0, p.1 - c.1);
    (c, d.0 * d.0 + d.1 * d.1)
}

/// Signed distance from a body-frame point to the footprint boundary plus
/// its gradient with respect to the point.
///
/// The distance is negative strictly inside and positive strictly outside.
/// The gradient has unit norm away from the apex/medial loci; at
/// non-differentiable points it follows the first nearest boundary feature
/// in the fixed order (left slant, right slant, far edge), which keeps runs
/// reproducible. The z component of the gradient is always zero for the
/// planar triangle.
pub fn signed_distance(q: &Vector3<f64>, shape: &FovShape) -> (f64, Vector3<f64>) {
    let FovShape::Triangle2d { depth, half_angle } = *shape;
    let tan = half_angle.tan();
    let p = (q[0], q[1]);
    let apex = (0.0, 0.0);
    let left = (depth, depth * tan);
    let right = (depth, -depth * tan);

    // Edges in tie-break order: left slant, right slant, far edge.
    let edges = [(apex, left), (apex, right), (left, right)];
    // Outward normals of the edges (unit, pointing away from the interior).
    let (s, c) = half_angle.sin_cos();
    let normals = [(-s, c), (-s, -c), (1.0, 0.0)];

    let mut best = 0usize;
    let mut best_closest = (0.0, 0.0);
    let mut best_d2 = f64::INFINITY;
    for (i, (a, b)) in edges.iter().enumerate() {
        let (closest, d2) = segment_closest(p, *a, *b);
        if d2 < best_d2 {
            best = i;
            best_d2 = d2;
            best_closest = closest;
        }
    }

    let inside = p.1.abs() <= p.0 * tan && p.0 <= depth;
    let dist = best_d2.sqrt();
    let d = if inside { -dist } else { dist };

    let grad = if dist > 1e-12 {
        // Unit vector from the closest boundary point towards q, oriented so
        // d increases outward.
        let dir = ((p.0 - best_closest.0) / dist, (p.1 - best_closest.1) / dist);
        if inside {
            Vector3::new(-dir.0, -dir.1, 0.0)
        } else {
            Vector3::new(dir.0, dir.1, 0.0)
        }
    } else {
        // On the boundary: outward normal of the selected edge.
        Vector3::new(normals[best].0, normals[best].1, 0.0)
    };
    (d, grad)
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Gaussian-CDF-shaped smoothing of the signed distance:
/// `(1 + erf(x/(sqrt(2) kappa) - 2))/2`.
pub fn probit(x: f64, p: &ProbitParams) -> f64 {
    0.5 * (1.0 + libm::erf(x / (SQRT_2 * p.kappa) - 2.0))
}

/// Derivative of [`probit`] with respect to `x`.
pub fn probit_deriv(x: f64, p: &ProbitParams) -> f64 {
    let g = x / (SQRT_2 * p.kappa) - 2.0;
    (-g * g).exp() / (std::f64::consts::PI.sqrt() * SQRT_2 * p.kappa)
}

//! Analytical reward gradient via perturbation propagation.
//!
//! For every policy parameter `i` the rollout carries the pose perturbation
//! `Lambda_i = dT_k/dtheta_i` (a 4x4 matrix) and, per target `j`, the
//! information perturbation `Omega_{j,i} = dY_k/dtheta_i`. Both start at
//! zero and evolve alongside the rollout:
//!
//! * `Lambda' = Lambda E + T sum_j J[j,i] dexp_j`, with `E = exp(tau u^)`
//!   and `J` the control Jacobian of this step;
//! * `Omega' = F Omega F^T + s_i H^T V^-1 H`, where `F = P' A Y^-1` is the
//!   prediction dissipation factor and `s_i` chains the probit derivative of
//!   the signed distance through the body-frame transform and `Lambda'`.
//!
//! The dissipation factor is the inverse-free equivalent of
//! `(A^T + Y A^-1 W)^-1 ... (A + W A^-T Y)^-1`; the two agree whenever `A`
//! is invertible and `F Omega F^T` stays valid for singular `A`.
//!
//! The terminal gradient of `sum_j log det Y_K` is
//! `sum_j tr(Y_K^-1 Omega_K)`.

use crate::belief::TargetBelief;
use crate::error::{Error, Result};
use crate::fov::{body_frame, probit_deriv, signed_distance, zeta, FovShape, ProbitParams};
use crate::liegroup::{dexp_all, expmap, Pose, Twist};
use nalgebra::{Cholesky, DMatrix, Matrix4, Vector4};

/// Control Jacobian of one step: 6 x n_p, stored row-major with an explicit
/// list of the rows that can be non-zero.
#[derive(Debug, Clone)]
pub struct ControlJacobian {
    n_p: usize,
    rows: Vec<f64>,
    active: Vec<usize>,
}

impl ControlJacobian {
    pub fn zeros(n_p: usize) -> Self {
        ControlJacobian { n_p, rows: vec![0.0; 6 * n_p], active: Vec::new() }
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.rows[j * self.n_p..(j + 1) * self.n_p]
    }

    /// Mutable row access; marks the row as potentially non-zero.
    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        assert!(j < 6);
        if !self.active.contains(&j) {
            self.active.push(j);
            self.active.sort_unstable();
        }
        &mut self.rows[j * self.n_p..(j + 1) * self.n_p]
    }

    pub fn from_matrix(j: &DMatrix<f64>) -> Self {
        assert_eq!(j.nrows(), 6);
        let mut out = ControlJacobian::zeros(j.ncols());
        for r in 0..6 {
            if j.row(r).iter().any(|x| *x != 0.0) {
                let row: Vec<f64> = j.row(r).iter().copied().collect();
                out.row_mut(r).copy_from_slice(&row);
            }
        }
        out
    }
}

/// Per-parameter pose and per-target information perturbations of one
/// episode.
#[derive(Debug, Clone)]
pub struct PerturbationState {
    n_p: usize,
    n_l: usize,
    n_y: usize,
    lambda: Vec<Matrix4<f64>>,
    /// `n_l * n_p` blocks of `n_y * n_y`, row-major.
    omega: Vec<f64>,
    /// Predicted-information perturbations `F Omega F^T` of the current
    /// step, same shape as `omega`.
    psi: Vec<f64>,
    /// Row-major index of each upper-triangular (vech) coordinate.
    vech_idx: Vec<usize>,
    corrupt_exp_derivative: bool,
}

impl PerturbationState {
    /// Zero-initialized state (the initial condition of both recursions).
    pub fn new(n_p: usize, n_l: usize, n_y: usize) -> Self {
        let block = n_y * n_y;
        let mut vech_idx = Vec::with_capacity(n_y * (n_y + 1) / 2);
        for i in 0..n_y {
            for j in i..n_y {
                vech_idx.push(i * n_y + j);
            }
        }
        PerturbationState {
            n_p,
            n_l,
            n_y,
            lambda: vec![Matrix4::zeros(); n_p],
            omega: vec![0.0; n_l * n_p * block],
            psi: vec![0.0; n_l * n_p * block],
            vech_idx,
            corrupt_exp_derivative: false,
        }
    }

    /// Negative-control hook for the gradient verification suite: scales one
    /// exponential-map derivative so the finite-difference check must fail.
    pub fn set_exp_derivative_corruption(&mut self, on: bool) {
        self.corrupt_exp_derivative = on;
    }

    pub fn n_params(&self) -> usize {
        self.n_p
    }

    pub fn lambda(&self, i: usize) -> &Matrix4<f64> {
        &self.lambda[i]
    }

    fn block(&self) -> usize {
        self.n_y * self.n_y
    }

    fn omega_off(&self, target: usize, i: usize) -> usize {
        (target * self.n_p + i) * self.block()
    }

    pub fn omega(&self, target: usize, i: usize) -> &[f64] {
        let off = self.omega_off(target, i);
        &self.omega[off..off + self.block()]
    }

    pub fn omega_matrix(&self, target: usize, i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_y, self.n_y, self.omega(target, i))
    }

    /// Predicted-information perturbation `F Omega F^T` for the current
    /// step, valid after [`Self::predict_psi`].
    pub fn psi(&self, target: usize, i: usize) -> &[f64] {
        let off = self.omega_off(target, i);
        &self.psi[off..off + self.block()]
    }

    /// Dot product of `coeffs` with the vech coordinates of one psi block.
    pub fn psi_vech_dot(&self, target: usize, i: usize, coeffs: &[f64]) -> f64 {
        let psi = self.psi(target, i);
        coeffs.iter().zip(&self.vech_idx).map(|(c, &k)| c * psi[k]).sum()
    }

    /// Pose-perturbation step: `Lambda_i <- Lambda_i E + T sum_j J[j,i] D_j`.
    pub fn step_lambda(&mut self, t_k: &Pose, u_k: &Twist, jac: &ControlJacobian, tau: f64) {
        assert_eq!(jac.n_p(), self.n_p);
        let e = *expmap(u_k, tau).matrix();
        let mut d = dexp_all(u_k, tau);
        if self.corrupt_exp_derivative {
            d[0] *= 1.001;
        }
        // Fold T into the derivative matrices once.
        let td: Vec<(usize, Matrix4<f64>)> =
            jac.active.iter().map(|&j| (j, t_k.matrix() * d[j])).collect();
        for i in 0..self.n_p {
            let mut next = self.lambda[i] * e;
            for (j, tdj) in &td {
                let coeff = jac.row(*j)[i];
                if coeff != 0.0 {
                    next += *tdj * coeff;
                }
            }
            self.lambda[i] = next;
        }
    }

    /// Fills the psi buffer for one target from the prediction dissipation
    /// factor `F = P' A Y^-1` (see [`crate::belief::predict_with_gain`]).
    pub fn predict_psi(&mut self, target: usize, gain: &DMatrix<f64>) {
        let n = self.n_y;
        debug_assert_eq!(gain.nrows(), n);
        let f: Vec<f64> = (0..n * n).map(|k| gain[(k / n, k % n)]).collect();
        let block = self.block();
        let mut tmp = vec![0.0; block];
        for i in 0..self.n_p {
            let off = self.omega_off(target, i);
            let om = &self.omega[off..off + block];
            // tmp = F * Omega
            for r in 0..n {
                for c in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += f[r * n + k] * om[k * n + c];
                    }
                    tmp[r * n + c] = acc;
                }
            }
            // psi = tmp * F^T
            let ps = &mut self.psi[off..off + block];
            for r in 0..n {
                for c in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += tmp[r * n + k] * f[c * n + k];
                    }
                    ps[r * n + c] = acc;
                }
            }
        }
    }

    /// Completes the information-perturbation step for one target:
    /// `Omega <- psi + s_i H^T V^-1 H`, where `s_i` chains the probit
    /// derivative through the body-frame transform and the already-updated
    /// pose perturbation.
    pub fn commit_omega(
        &mut self,
        target: usize,
        prior: &TargetBelief,
        t_next: &Pose,
        model: &crate::belief::TargetModel,
        shape: &FovShape,
        probit_params: &ProbitParams,
    ) {
        let n = self.n_y;
        let block = self.block();
        let q = body_frame(t_next, &zeta(&prior.mean));
        let (dist, grad) = signed_distance(&q, shape);
        let pd = probit_deriv(dist, probit_params);
        let t_inv = t_next.inverse();
        let ti = t_inv.matrix();

        // c[k] = pd * sum_r grad[r] * Tinv[r, k] (the row vector through the
        // projection), rbar = Tinv * [zeta(p); 1].
        let mut c = [0.0; 4];
        for k in 0..4 {
            c[k] = pd * (grad[0] * ti[(0, k)] + grad[1] * ti[(1, k)] + grad[2] * ti[(2, k)]);
        }
        let z = zeta(&prior.mean);
        let rbar = ti * Vector4::new(z[0], z[1], z[2], 1.0);

        let g: Vec<f64> = {
            let si = model.sensor_info();
            (0..n * n).map(|k| si[(k / n, k % n)]).collect()
        };

        for i in 0..self.n_p {
            let lam = &self.lambda[i];
            // s = c . (Lambda rbar); the bottom row of Lambda is zero.
            let mut s = 0.0;
            for r in 0..3 {
                let lr = lam[(r, 0)] * rbar[0]
                    + lam[(r, 1)] * rbar[1]
                    + lam[(r, 2)] * rbar[2]
                    + lam[(r, 3)] * rbar[3];
                s += c[r] * lr;
            }
            let off = self.omega_off(target, i);
            for k in 0..block {
                self.omega[off + k] = self.psi[off + k] + s * g[k];
            }
            // Symmetrize against round-off drift.
            for r in 0..n {
                for cc in (r + 1)..n {
                    let avg = 0.5 * (self.omega[off + r * n + cc] + self.omega[off + cc * n + r]);
                    self.omega[off + r * n + cc] = avg;
                    self.omega[off + cc * n + r] = avg;
                }
            }
        }
    }

    /// Full information-perturbation step for one target, deriving the
    /// dissipation factor from the previous posterior information.
    #[allow(clippy::too_many_arguments)]
    pub fn step_omega(
        &mut self,
        target: usize,
        prev_info: &DMatrix<f64>,
        prior: &TargetBelief,
        t_next: &Pose,
        model: &crate::belief::TargetModel,
        shape: &FovShape,
        probit_params: &ProbitParams,
    ) -> Result<()> {
        let chol = Cholesky::new(prev_info.clone()).ok_or(Error::SingularPosterior)?;
        let x = chol.solve(&model.a.transpose());
        let gain = &prior.info * x.transpose();
        self.predict_psi(target, &gain);
        self.commit_omega(target, prior, t_next, model, shape, probit_params);
        Ok(())
    }

    /// Gradient of `sum_j log det Y_K` from the terminal information
    /// matrices and perturbations: `sum_j tr(Y^-1 Omega)`.
    pub fn reward_gradient(&self, final_infos: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        assert_eq!(final_infos.len(), self.n_l);
        let n = self.n_y;
        let block = self.block();
        let mut grad = vec![0.0; self.n_p];
        for (j, y) in final_infos.iter().enumerate() {
            let inv = Cholesky::new(y.clone()).ok_or(Error::SingularPosterior)?.inverse();
            let yinv: Vec<f64> = (0..block).map(|k| inv[(k / n, k % n)]).collect();
            for (i, g) in grad.iter_mut().enumerate() {
                let off = self.omega_off(j, i);
                let om = &self.omega[off..off + block];
                // tr(Y^-1 Omega) as an elementwise product of symmetric blocks.
                let mut acc = 0.0;
                for k in 0..block {
                    acc += yinv[k] * om[k];
                }
                *g += acc;
            }
        }
        Ok(grad)
    }
}

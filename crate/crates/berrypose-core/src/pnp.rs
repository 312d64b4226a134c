//! Pose recovery from 2D-3D point correspondences.
//!
//! The solver runs a direct linear transform on normalized image
//! coordinates for initialization, orthonormalizes the rotation by polar
//! decomposition, then refines with damped least squares (Levenberg-
//! Marquardt, lambda scaled by 10 on rejected steps and by 1/10 on accepted
//! ones). Only improving steps are accepted, so refinement can never end
//! worse than the linear estimate.
//!
//! The nine model points of a detection are the box center plus the eight
//! corners of the decoded size, which span a full 3D volume; the known
//! metric size is what resolves the monocular scale and yields a metric
//! translation.

use crate::geometry::{CameraIntrinsics, Pose, Rotation, Size3D};
use crate::math::{cholesky_solve, jacobi_eigh, Mat3, Vec3};
use alloc::vec;
use alloc::vec::Vec;

const MAX_ITERATIONS: usize = 50;
const RMSE_DELTA_STOP: f64 = 1e-8;
const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PnpError {
    #[error("need at least 6 correspondences, got {0}")]
    NotEnoughPoints(usize),
    #[error("linear initialization is degenerate")]
    DegenerateInit,
    #[error("solution places points behind the camera")]
    CheiralityFailure,
    #[error("refinement diverged (non-finite error)")]
    Diverged,
}

/// 2D-3D correspondences: model-frame points (meters) paired with image
/// points (pixels).
#[derive(Debug, Clone)]
pub struct Correspondences {
    points: Vec<(Vec3, [f64; 2])>,
}

impl Correspondences {
    pub fn new(points: Vec<(Vec3, [f64; 2])>) -> Result<Correspondences, PnpError> {
        if points.len() < 6 {
            return Err(PnpError::NotEnoughPoints(points.len()));
        }
        Ok(Correspondences { points })
    }

    /// The canonical nine-point set of a decoded detection: box-frame center
    /// and corners of `size` paired with the detection's image keypoints.
    pub fn from_keypoints(
        keypoints: &[[f64; 2]; 9],
        size: &Size3D,
    ) -> Correspondences {
        let model = crate::geometry::OrientedBox3D::model_points(size);
        Correspondences {
            points: model.iter().copied().zip(keypoints.iter().copied()).collect(),
        }
    }

    pub fn points(&self) -> &[(Vec3, [f64; 2])] {
        &self.points
    }
}

/// Solver output with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct PnpSolution {
    pub pose: Pose,
    pub initial_rmse: f64,
    pub final_rmse: f64,
    pub iterations: usize,
}

/// Root-mean-square of the per-point reprojection residual norms, pixels.
/// Infinite if any point falls behind the camera under `pose`.
pub fn reprojection_rmse(pose: &Pose, c: &Correspondences, k: &CameraIntrinsics) -> f64 {
    let mut sum = 0.0;
    for (model, obs) in c.points() {
        let p = pose.apply(*model);
        if p.z <= MIN_DEPTH {
            return f64::INFINITY;
        }
        let u = k.fx * p.x / p.z + k.cx;
        let v = k.fy * p.y / p.z + k.cy;
        let du = u - obs[0];
        let dv = v - obs[1];
        sum += du * du + dv * dv;
    }
    libm::sqrt(sum / c.points().len() as f64)
}

/// Recovers the pose minimizing the reprojection error of `c` under `k`.
pub fn solve_pnp(c: &Correspondences, k: &CameraIntrinsics) -> Result<Pose, PnpError> {
    solve_pnp_detailed(c, k).map(|s| s.pose)
}

pub fn solve_pnp_detailed(
    c: &Correspondences,
    k: &CameraIntrinsics,
) -> Result<PnpSolution, PnpError> {
    let init = linear_init(c, k)?;
    let initial_rmse = reprojection_rmse(&init, c, k);
    if !initial_rmse.is_finite() {
        return Err(PnpError::CheiralityFailure);
    }

    let (pose, final_rmse, iterations) = refine(init, initial_rmse, c, k)?;

    for (model, _) in c.points() {
        if pose.apply(*model).z <= MIN_DEPTH {
            return Err(PnpError::CheiralityFailure);
        }
    }
    Ok(PnpSolution { pose, initial_rmse, final_rmse, iterations })
}

/// DLT on normalized coordinates: the smallest eigenvector of the 12x12
/// normal matrix gives the projection `P ~ [R | t]`, whose left block is
/// orthonormalized by polar decomposition.
fn linear_init(c: &Correspondences, k: &CameraIntrinsics) -> Result<Pose, PnpError> {
    // normal matrix N = A^T A accumulated row pair by row pair
    let mut nm = vec![0.0; 12 * 12];
    let mut add_row = |row: [f64; 12]| {
        for i in 0..12 {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..12 {
                nm[i * 12 + j] += row[i] * row[j];
            }
        }
    };
    for (model, obs) in c.points() {
        let x = (obs[0] - k.cx) / k.fx;
        let y = (obs[1] - k.cy) / k.fy;
        let (mx, my, mz) = (model.x, model.y, model.z);
        add_row([
            mx, my, mz, 1.0, 0.0, 0.0, 0.0, 0.0, -x * mx, -x * my, -x * mz, -x,
        ]);
        add_row([
            0.0, 0.0, 0.0, 0.0, mx, my, mz, 1.0, -y * mx, -y * my, -y * mz, -y,
        ]);
    }

    let (_vals, vecs) = jacobi_eigh(12, &mut nm);
    // eigenvector of the smallest eigenvalue is column 0
    let mut p = [0.0; 12];
    for (i, pi) in p.iter_mut().enumerate() {
        *pi = vecs[i * 12];
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(PnpError::DegenerateInit);
    }

    // fix the overall sign so depths come out positive
    let mut depth_sum = 0.0;
    for (model, _) in c.points() {
        depth_sum += p[8] * model.x + p[9] * model.y + p[10] * model.z + p[11];
    }
    if depth_sum < 0.0 {
        for v in p.iter_mut() {
            *v = -*v;
        }
    }

    let m = Mat3::from_rows([p[0], p[1], p[2]], [p[4], p[5], p[6]], [p[8], p[9], p[10]]);

    // polar decomposition via the eigensystem of M^T M
    let mtm = m.transpose().mul_mat(&m);
    let mut flat: Vec<f64> = mtm.m.iter().flatten().copied().collect();
    let (vals, vecs) = jacobi_eigh(3, &mut flat);
    if vals[0] <= 1e-30 {
        return Err(PnpError::DegenerateInit);
    }
    let sing: Vec<f64> = vals.iter().map(|&l| libm::sqrt(l.max(0.0))).collect();
    let v = Mat3 {
        m: [
            [vecs[0], vecs[1], vecs[2]],
            [vecs[3], vecs[4], vecs[5]],
            [vecs[6], vecs[7], vecs[8]],
        ],
    };
    // columns of U' = M V / sigma
    let mut u = [[0.0; 3]; 3];
    for col in 0..3 {
        let mv = m.mul_vec(v.col(col)) / sing[col];
        u[0][col] = mv.x;
        u[1][col] = mv.y;
        u[2][col] = mv.z;
    }
    let mut u = Mat3 { m: u };
    let mut r = u.mul_mat(&v.transpose());
    if r.det() < 0.0 {
        // reflection: flip the direction of the smallest singular value
        for row in 0..3 {
            u.m[row][0] = -u.m[row][0];
        }
        r = u.mul_mat(&v.transpose());
    }

    let scale = (sing[0] + sing[1] + sing[2]) / 3.0;
    if scale <= 1e-30 || !scale.is_finite() {
        return Err(PnpError::DegenerateInit);
    }
    let t = Vec3::new(p[3], p[7], p[11]) / scale;

    Ok(Pose::new(Rotation::from_matrix(&r), t))
}

fn refine(
    init: Pose,
    init_rmse: f64,
    c: &Correspondences,
    k: &CameraIntrinsics,
) -> Result<(Pose, f64, usize), PnpError> {
    let mut pose = init;
    let mut rmse = init_rmse;
    let mut lambda = 1e-3;
    let mut iterations = 0;

    for _ in 0..MAX_ITERATIONS {
        iterations += 1;

        // assemble J^T J and J^T r over [omega | dt]
        let mut h = [0.0; 36];
        let mut g = [0.0; 6];
        let r_mat = pose.rotation.to_matrix();
        for (model, obs) in c.points() {
            let y = r_mat.mul_vec(*model) + pose.translation;
            if y.z <= MIN_DEPTH {
                return Err(PnpError::CheiralityFailure);
            }
            let inv_z = 1.0 / y.z;
            let u = k.fx * y.x * inv_z + k.cx;
            let v = k.fy * y.y * inv_z + k.cy;
            let ru = u - obs[0];
            let rv = v - obs[1];

            // du/dY and dv/dY
            let du_dy = Vec3::new(k.fx * inv_z, 0.0, -k.fx * y.x * inv_z * inv_z);
            let dv_dy = Vec3::new(0.0, k.fy * inv_z, -k.fy * y.y * inv_z * inv_z);
            // dY/domega = -skew(R * model), dY/dt = I
            let rx = r_mat.mul_vec(*model);
            let dy_dw = Mat3::skew(rx).scale(-1.0);

            let mut ju = [0.0; 6];
            let mut jv = [0.0; 6];
            for col in 0..3 {
                let wcol = dy_dw.col(col);
                ju[col] = du_dy.dot(wcol);
                jv[col] = dv_dy.dot(wcol);
            }
            ju[3] = du_dy.x;
            ju[4] = du_dy.y;
            ju[5] = du_dy.z;
            jv[3] = dv_dy.x;
            jv[4] = dv_dy.y;
            jv[5] = dv_dy.z;

            for i in 0..6 {
                g[i] += ju[i] * ru + jv[i] * rv;
                for j in 0..6 {
                    h[i * 6 + j] += ju[i] * ju[j] + jv[i] * jv[j];
                }
            }
        }

        // try damped steps until one improves the error
        let mut accepted = false;
        while lambda <= 1e12 {
            let mut damped = h;
            for i in 0..6 {
                damped[i * 6 + i] += lambda;
            }
            let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
            let Some(delta) = cholesky_solve(6, &damped, &rhs) else {
                lambda *= 10.0;
                continue;
            };

            let omega = Vec3::new(delta[0], delta[1], delta[2]);
            let angle = omega.norm();
            let dq = if angle < 1e-18 {
                Rotation::IDENTITY
            } else {
                Rotation::from_axis_angle(omega, angle).map_err(|_| PnpError::Diverged)?
            };
            let candidate = Pose::new(
                dq.compose(&pose.rotation),
                pose.translation + Vec3::new(delta[3], delta[4], delta[5]),
            );
            let cand_rmse = reprojection_rmse(&candidate, c, k);
            if cand_rmse.is_finite() && cand_rmse < rmse {
                let delta_rmse = rmse - cand_rmse;
                pose = candidate;
                rmse = cand_rmse;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if delta_rmse < RMSE_DELTA_STOP {
                    return Ok((pose, rmse, iterations));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break; // no damped step improves: converged
        }
    }

    if !rmse.is_finite() {
        return Err(PnpError::Diverged);
    }
    Ok((pose, rmse, iterations))
}

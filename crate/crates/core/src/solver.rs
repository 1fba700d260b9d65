//! Levenberg-Marquardt minimization of the assembled energy over the
//! global pose and all node affines/translations.
//!
//! Each iteration rebuilds the association snapshot under the current
//! warp, assembles residuals and the block Jacobian, and solves the
//! damped normal equations `(J^T J + lambda diag(J^T J)) delta = -J^T r`
//! on the sparse block structure. Rejected steps restore the previous
//! state and raise the damping; the global rotation is retracted back
//! onto the rotation manifold after every accepted step.

use crate::energy::{
    apply_delta, assemble, build_snapshot, residual_values, EnergyBreakdown, EnergyParams,
    FrameProblem,
};
use crate::geometry::DepthScan;
use crate::posefeed::{FeatureCorrespondence, PosePrior};
use crate::sparse::{cholesky, NormalEquations};
use crate::warpfield::{Skinning, WarpField};
use crate::{Error, Mat3, Result, Vec3};

/// Damping beyond which the solver gives up on an iteration.
const LAMBDA_MAX: f64 = 1e12;
/// Relative residual bound the linear solve must satisfy.
const LINEAR_SOLVE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Relative energy decrease below which the solve is converged.
    pub convergence_tol: f64,
    /// Parameter-update norm below which the solve is converged.
    pub step_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 0.5,
            convergence_tol: 1e-9,
            step_tol: 1e-9,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.damping_up > 1.0) || !(self.damping_down < 1.0) || !(self.damping_down > 0.0) {
            return Err(Error::Config("damping factors must satisfy up > 1, 0 < down < 1".into()));
        }
        if !(self.initial_damping > 0.0) || !(self.convergence_tol > 0.0) || !(self.step_tol > 0.0)
        {
            return Err(Error::Config("damping and tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    Stalled,
}

/// One solver iteration as recorded in the report trace. Energies are
/// evaluated under the iteration's own association snapshot, so for every
/// accepted iteration `energy_after <= energy_before`.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub energy_before: f64,
    pub energy_after: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub visible: usize,
    pub breakdown: EnergyBreakdown,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub trace: Vec<IterationRecord>,
    pub termination: Termination,
    pub gimbal_fallback: bool,
    pub residual_count: usize,
}

/// Everything the solver needs for one frame.
pub struct FrameInputs<'a> {
    pub positions: &'a [Vec3],
    pub normals: &'a [Vec3],
    pub skins: &'a [Skinning],
    pub scan: &'a DepthScan,
    pub correspondences: &'a [FeatureCorrespondence],
    pub prior: Option<&'a PosePrior>,
}

/// Project a nearly orthonormal matrix back onto SO(3).
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Minimize the frame energy, returning the updated field and a report.
/// The returned field always reflects the last accepted state; a stalled
/// solve leaves it at that state and says so.
pub fn solve(
    field: &WarpField,
    inputs: &FrameInputs,
    params: &EnergyParams,
    config: &SolverConfig,
) -> Result<(WarpField, SolveReport)> {
    config.validate()?;
    debug_assert_eq!(inputs.positions.len(), inputs.normals.len());
    debug_assert_eq!(inputs.positions.len(), inputs.skins.len());

    let mut field = field.clone();
    let mut lambda = config.initial_damping;
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut initial_energy = None;
    let mut final_energy = 0.0;
    let mut termination = Termination::MaxIterations;
    let mut gimbal = false;
    let mut residual_count = 0;

    for iteration in 0..config.max_iterations {
        let problem = FrameProblem {
            positions: inputs.positions,
            normals: inputs.normals,
            skins: inputs.skins,
            scan: inputs.scan,
        };
        let snapshot =
            build_snapshot(&problem, &field, params, inputs.correspondences, inputs.prior);
        let res = assemble(&field, &problem, &snapshot, params);
        if res.values.is_empty() {
            return Err(Error::EmptyProblem);
        }
        residual_count = res.values.len();
        gimbal |= res.gimbal_fallback;
        let energy_before = res.energy();
        if initial_energy.is_none() {
            initial_energy = Some(energy_before);
        }
        final_energy = energy_before;
        if energy_before <= 1e-30 {
            termination = Termination::Converged;
            break;
        }

        let normal_eq = NormalEquations::from_residuals(field.nodes.len(), &res);
        let rhs: Vec<f64> = normal_eq.gradient.iter().map(|g| -g).collect();
        let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rhs_norm < 1e-300 {
            termination = Termination::Converged;
            break;
        }

        let mut accepted = false;
        loop {
            let damped = normal_eq.to_csc(lambda, 1e-12);
            let step = cholesky(&damped).map(|factor| factor.solve(&rhs)).filter(|delta| {
                let ax = damped.mul_symmetric(delta);
                let err: f64 =
                    ax.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                err <= LINEAR_SOLVE_TOL * rhs_norm
            });
            let Some(delta) = step else {
                lambda *= config.damping_up;
                if lambda > LAMBDA_MAX {
                    termination = Termination::Stalled;
                    break;
                }
                continue;
            };
            let step_norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if step_norm < config.step_tol {
                // no meaningful motion left at this damping; the state is
                // converged rather than stalled
                termination = Termination::Converged;
                break;
            }
            let mut candidate = apply_delta(&field, &delta);
            candidate.rotation = orthonormalize(&candidate.rotation);
            let (values, breakdown) = residual_values(&candidate, &problem, &snapshot, params);
            let energy_after: f64 = values.iter().map(|r| r * r).sum();

            if energy_after <= energy_before {
                field = candidate;
                final_energy = energy_after;
                lambda = (lambda * config.damping_down).max(1e-15);
                trace.push(IterationRecord {
                    iteration,
                    lambda,
                    energy_before,
                    energy_after,
                    step_norm,
                    accepted: true,
                    visible: snapshot.data.len(),
                    breakdown,
                });
                accepted = true;
                let decrease = energy_before - energy_after;
                if decrease <= config.convergence_tol * energy_before.max(1e-30)
                    || step_norm < config.step_tol
                {
                    termination = Termination::Converged;
                }
                break;
            }

            lambda *= config.damping_up;
            if lambda > LAMBDA_MAX {
                trace.push(IterationRecord {
                    iteration,
                    lambda,
                    energy_before,
                    energy_after,
                    step_norm,
                    accepted: false,
                    visible: snapshot.data.len(),
                    breakdown,
                });
                termination = Termination::Stalled;
                break;
            }
        }

        if !accepted || termination == Termination::Converged {
            break;
        }
    }

    let iterations = trace.iter().filter(|r| r.accepted).count();
    Ok((
        field,
        SolveReport {
            iterations,
            initial_energy: initial_energy.unwrap_or(0.0),
            final_energy,
            trace,
            termination,
            gimbal_fallback: gimbal,
            residual_count,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Grid};
    use crate::warpfield::compute_skinning;

    /// Gently wavy surface scan; curvature in both axes makes all six pose
    /// degrees observable from the data term alone.
    fn wavy_scan(pose_r: &Mat3, pose_t: &Vec3) -> DepthScan {
        let k = CameraIntrinsics::new(200.0, 200.0, 32.0, 24.0, 64, 48).unwrap();
        let mut depth = Grid::filled(64, 48, f64::NAN);
        // surface in the world frame: z = 50 + 2 sin(2 pi x / 20) cos(2 pi y / 20)
        let surface = |x: f64, y: f64| {
            50.0 + 2.0
                * (2.0 * std::f64::consts::PI * x / 20.0).sin()
                * (2.0 * std::f64::consts::PI * y / 20.0).cos()
        };
        let r_inv = pose_r.transpose();
        let cam_center = -(r_inv * pose_t);
        for py in 0..48 {
            for px in 0..64 {
                let dir = r_inv
                    * Vec3::new((px as f64 - k.cx) / k.fx, (py as f64 - k.cy) / k.fy, 1.0);
                // newton on s: (c + s d).z - surface((c + s d).xy) = 0
                let mut s = 50.0;
                for _ in 0..40 {
                    let p = cam_center + s * dir;
                    let f = p.z - surface(p.x, p.y);
                    let h = 1e-6;
                    let p2 = cam_center + (s + h) * dir;
                    let fp = (p2.z - surface(p2.x, p2.y) - f) / h;
                    if fp.abs() < 1e-12 {
                        break;
                    }
                    let next = s - f / fp;
                    if (next - s).abs() < 1e-12 {
                        s = next;
                        break;
                    }
                    s = next;
                }
                let world = cam_center + s * dir;
                let cam = pose_r * world + pose_t;
                if cam.z > 0.0 {
                    *depth.get_mut(px, py) = cam.z;
                }
            }
        }
        let color = Grid::filled(64, 48, [128u8; 3]);
        DepthScan::from_depth_color(depth, color, k, 0).unwrap()
    }

    fn model_from_scan(scan: &DepthScan) -> (Vec<Vec3>, Vec<Vec3>) {
        let mut positions = Vec::new();
        let mut normals = Vec::new();
        for y in (1..scan.height() - 1).step_by(2) {
            for x in (1..scan.width() - 1).step_by(2) {
                if scan.pixel_is_valid(x, y) {
                    positions.push(scan.lift_pixel(x, y).unwrap());
                    normals.push(*scan.normals.get(x, y));
                }
            }
        }
        (positions, normals)
    }

    fn skins_for(positions: &[Vec3], field: &WarpField) -> Vec<Skinning> {
        positions.iter().map(|p| compute_skinning(p, field)).collect()
    }

    #[test]
    fn fixed_point_converges_immediately() {
        let scan = wavy_scan(&Mat3::identity(), &Vec3::zeros());
        let (positions, normals) = model_from_scan(&scan);
        let field = WarpField::from_points(&positions, 8.0, 4, 4).unwrap();
        let skins = skins_for(&positions, &field);
        let params = EnergyParams::default();
        let inputs = FrameInputs {
            positions: &positions,
            normals: &normals,
            skins: &skins,
            scan: &scan,
            correspondences: &[],
            prior: None,
        };
        let (out, report) = solve(&field, &inputs, &params, &SolverConfig::default()).unwrap();
        assert_eq!(report.termination, Termination::Converged);
        assert!(report.iterations <= 1, "took {} iterations", report.iterations);
        assert!((report.final_energy - report.initial_energy).abs() <= 1e-10);
        assert!((out.translation - field.translation).norm() < 1e-9);
    }

    #[test]
    fn recovers_pure_translation_offset() {
        // scan taken from a camera displaced by (2, 0, 0)
        let true_t = Vec3::new(2.0, 0.0, 0.0);
        let scan = wavy_scan(&Mat3::identity(), &true_t);
        // model from an identity-pose view of the same surface
        let reference = wavy_scan(&Mat3::identity(), &Vec3::zeros());
        let (positions, normals) = model_from_scan(&reference);
        let field = WarpField::from_points(&positions, 8.0, 4, 4).unwrap();
        let skins = skins_for(&positions, &field);
        let params = EnergyParams::default();
        let inputs = FrameInputs {
            positions: &positions,
            normals: &normals,
            skins: &skins,
            scan: &scan,
            correspondences: &[],
            prior: None,
        };
        let config = SolverConfig { max_iterations: 30, ..SolverConfig::default() };
        let (out, report) = solve(&field, &inputs, &params, &config).unwrap();
        assert!(
            (out.translation - true_t).norm() < 0.01,
            "recovered {:?} (report {:?})",
            out.translation,
            report.termination
        );
        // accepted-step energies never increase within their iteration
        for rec in report.trace.iter().filter(|r| r.accepted) {
            assert!(rec.energy_after <= rec.energy_before);
        }
    }

    #[test]
    fn solving_a_converged_problem_is_idempotent() {
        let scan = wavy_scan(&Mat3::identity(), &Vec3::new(1.0, 0.5, 0.0));
        let reference = wavy_scan(&Mat3::identity(), &Vec3::zeros());
        let (positions, normals) = model_from_scan(&reference);
        let field = WarpField::from_points(&positions, 8.0, 4, 4).unwrap();
        let skins = skins_for(&positions, &field);
        let params = EnergyParams::default();
        let inputs = FrameInputs {
            positions: &positions,
            normals: &normals,
            skins: &skins,
            scan: &scan,
            correspondences: &[],
            prior: None,
        };
        let config = SolverConfig { max_iterations: 30, ..SolverConfig::default() };
        let (mid, _) = solve(&field, &inputs, &params, &config).unwrap();
        let (out, report) = solve(&mid, &inputs, &params, &config).unwrap();
        assert_eq!(report.termination, Termination::Converged);
        let last_step = report.trace.iter().filter(|r| r.accepted).next_back();
        if let Some(rec) = last_step {
            assert!(rec.step_norm < 1e-3, "second solve still moving: {}", rec.step_norm);
        }
        assert!((out.translation - mid.translation).norm() < 1e-6);
    }

    #[test]
    fn dominant_prior_anchors_the_pose() {
        let scan = wavy_scan(&Mat3::identity(), &Vec3::zeros());
        let (positions, normals) = model_from_scan(&scan);
        let field = WarpField::from_points(&positions, 8.0, 4, 4).unwrap();
        let skins = skins_for(&positions, &field);
        let prior_rotation =
            nalgebra::Rotation3::from_euler_angles(0.01, -0.02, 0.015).into_inner();
        let prior = PosePrior {
            rotation: prior_rotation,
            translation: Vec3::new(0.5, -0.25, 0.75),
            frame_index: 0,
        };
        let params = EnergyParams { w_r: 1e12, w_p: 1e12, ..EnergyParams::default() };
        let inputs = FrameInputs {
            positions: &positions,
            normals: &normals,
            skins: &skins,
            scan: &scan,
            correspondences: &[],
            prior: Some(&prior),
        };
        let config = SolverConfig { max_iterations: 20, ..SolverConfig::default() };
        let (out, _) = solve(&field, &inputs, &params, &config).unwrap();
        assert!((out.translation - prior.translation).norm() < 1e-6);
        let rel = out.rotation * prior.rotation.transpose();
        let angle = crate::energy::rotation_vector(&rel).norm();
        assert!(angle < 1e-6, "rotation off prior by {angle} rad");
    }

    #[test]
    fn empty_problem_is_an_error() {
        let scan = wavy_scan(&Mat3::identity(), &Vec3::zeros());
        let field = WarpField::from_points(&[Vec3::new(0.0, 0.0, 50.0)], 8.0, 1, 1).unwrap();
        let params = EnergyParams { w_rot: 0.0, w_reg: 0.0, w_data: 0.0, w_corr: 0.0, ..EnergyParams::default() };
        let inputs = FrameInputs {
            positions: &[],
            normals: &[],
            skins: &[],
            scan: &scan,
            correspondences: &[],
            prior: None,
        };
        assert!(matches!(
            solve(&field, &inputs, &params, &SolverConfig::default()),
            Err(Error::EmptyProblem)
        ));
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SolverConfig { damping_up: 0.5, ..SolverConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SolverConfig { max_iterations: 0, ..SolverConfig::default() };
        assert!(bad.validate().is_err());
    }
}

//! Residual blocks and analytic Jacobians of the six-term alignment
//! energy: node-affine rotation penalty, neighbor regularization,
//! point-to-plane data term, sparse correspondences, and the global-pose
//! prior (rotation and translation).
//!
//! Residuals are evaluated against a per-iteration [`Snapshot`] of frozen
//! data associations; within an iteration the energy is a smooth function
//! of the optimization variables, so analytic Jacobians can be checked
//! against finite differences.
//!
//! Variable layout: 12 values per node (affine row-major, then
//! translation) followed by the 6-dof global pose (rotation increment as a
//! world-frame axis-angle about the current rotation, then translation).

use crate::geometry::{back_project, project, DepthScan};
use crate::posefeed::{FeatureCorrespondence, PosePrior};
use crate::warpfield::{compute_skinning, deform_point, warp_normal, warp_point, Skinning, WarpField};
use crate::{Mat3, Vec3};

/// Term weights and visibility thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    pub w_rot: f64,
    pub w_reg: f64,
    pub w_data: f64,
    pub w_corr: f64,
    pub w_r: f64,
    pub w_p: f64,
    /// Visibility distance gate in mm.
    pub visibility_dist: f64,
    /// Visibility normal-angle gate in degrees.
    pub visibility_angle_deg: f64,
    /// Regularization edge weight.
    pub reg_edge_weight: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            w_rot: 1000.0,
            w_reg: 10_000.0,
            w_data: 1.0,
            w_corr: 10.0,
            w_r: 1e6,
            w_p: 1000.0,
            visibility_dist: 15.0,
            visibility_angle_deg: 10.0,
            reg_edge_weight: 1.0,
        }
    }
}

pub const NODE_BLOCK: usize = 12;
pub const POSE_BLOCK: usize = 6;

/// One dense column block of a Jacobian row. Block `m` (the node count) is
/// the 6-wide global pose; all lower indices are 12-wide nodes.
#[derive(Debug, Clone, Copy)]
pub struct RowBlock {
    pub block: usize,
    pub width: usize,
    pub values: [f64; NODE_BLOCK],
}

impl RowBlock {
    fn node(block: usize) -> Self {
        Self { block, width: NODE_BLOCK, values: [0.0; NODE_BLOCK] }
    }

    fn pose(block: usize) -> Self {
        Self { block, width: POSE_BLOCK, values: [0.0; NODE_BLOCK] }
    }
}

/// Frozen association of one visible model point with the scan.
#[derive(Debug, Clone)]
pub struct DataAssociation {
    /// Index into the frame's model point set.
    pub point: usize,
    /// Back-projected scan point at the hit pixel.
    pub target: Vec3,
    /// Scan normal at the hit pixel.
    pub normal: Vec3,
}

/// Sparse correspondence with its precomputed skinning.
#[derive(Debug, Clone)]
pub struct CorrAssociation {
    pub skin: Skinning,
    pub source: Vec3,
    pub target: Vec3,
}

/// Per-iteration association snapshot. Residuals over a snapshot are
/// smooth in the variables; the snapshot itself is rebuilt once per solver
/// iteration.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub data: Vec<DataAssociation>,
    pub corr: Vec<CorrAssociation>,
    pub prior: Option<PosePrior>,
}

/// Model points on the current frame, with skinning computed once per
/// frame (skinning depends only on node positions, which a solve never
/// moves).
pub struct FrameProblem<'a> {
    pub positions: &'a [Vec3],
    pub normals: &'a [Vec3],
    pub skins: &'a [Skinning],
    pub scan: &'a DepthScan,
}

/// Indices of points passing the visibility gates under the current warp:
/// in-frame projection onto a valid pixel, distance to the lifted pixel
/// below the gate, and normal agreement within the angle gate.
pub fn predict_visible(problem: &FrameProblem, field: &WarpField, params: &EnergyParams) -> Vec<usize> {
    let cos_gate = params.visibility_angle_deg.to_radians().cos();
    (0..problem.positions.len())
        .filter(|&i| associate(problem, field, i, params.visibility_dist, cos_gate).is_some())
        .collect()
}

fn associate(
    problem: &FrameProblem,
    field: &WarpField,
    i: usize,
    dist_gate: f64,
    cos_gate: f64,
) -> Option<(Vec3, Vec3)> {
    let skin = &problem.skins[i];
    let warped = warp_point(&problem.positions[i], skin, field);
    if warped.z <= 0.0 {
        return None;
    }
    let px = project(&warped, &problem.scan.intrinsics).ok()?;
    let (x, y) = problem.scan.intrinsics.nearest_pixel(px.u, px.v)?;
    if !problem.scan.pixel_is_valid(x, y) {
        return None;
    }
    let target = back_project(x as f64, y as f64, *problem.scan.depth.get(x, y), &problem.scan.intrinsics).ok()?;
    if (warped - target).norm() >= dist_gate {
        return None;
    }
    let scan_normal = *problem.scan.normals.get(x, y);
    let warped_normal = warp_normal(&problem.normals[i], skin, field).ok()?;
    if warped_normal.dot(&scan_normal) <= cos_gate {
        return None;
    }
    Some((target, scan_normal))
}

/// Freeze the associations for one solver iteration.
pub fn build_snapshot(
    problem: &FrameProblem,
    field: &WarpField,
    params: &EnergyParams,
    correspondences: &[FeatureCorrespondence],
    prior: Option<&PosePrior>,
) -> Snapshot {
    let cos_gate = params.visibility_angle_deg.to_radians().cos();
    let mut data = Vec::new();
    for i in 0..problem.positions.len() {
        if let Some((target, normal)) = associate(problem, field, i, params.visibility_dist, cos_gate)
        {
            data.push(DataAssociation { point: i, target, normal });
        }
    }
    let corr = correspondences
        .iter()
        .map(|c| CorrAssociation {
            skin: compute_skinning(&c.source, field),
            source: c.source,
            target: c.target,
        })
        .collect();
    Snapshot { data, corr, prior: prior.cloned() }
}

// ---- per-term residuals (unweighted) ----------------------------------

/// Six orthonormality residuals per node over the affine's columns.
pub fn rotation_residuals(field: &WarpField) -> Vec<f64> {
    let mut out = Vec::with_capacity(field.nodes.len() * 6);
    for node in &field.nodes {
        let a = &node.affine;
        let c = [a.column(0), a.column(1), a.column(2)];
        out.push(c[0].dot(&c[1]));
        out.push(c[0].dot(&c[2]));
        out.push(c[1].dot(&c[2]));
        out.push(c[0].dot(&c[0]) - 1.0);
        out.push(c[1].dot(&c[1]) - 1.0);
        out.push(c[2].dot(&c[2]) - 1.0);
    }
    out
}

/// Per directed neighbor edge, the 3-vector divergence of the two node
/// transforms at the neighbor's position, scaled by sqrt(alpha).
pub fn regularization_residuals(field: &WarpField, alpha: f64) -> Vec<f64> {
    let sqrt_alpha = alpha.sqrt();
    let mut out = Vec::new();
    for (j, node) in field.nodes.iter().enumerate() {
        let _ = j;
        for &k in &node.neighbors {
            let other = &field.nodes[k];
            let r = node.affine * (other.position - node.position) + node.position
                + node.translation
                - other.position
                - other.translation;
            out.extend_from_slice(&[sqrt_alpha * r.x, sqrt_alpha * r.y, sqrt_alpha * r.z]);
        }
    }
    out
}

/// Point-to-plane residual of each associated point against its frozen
/// scan target.
pub fn data_residuals(field: &WarpField, problem: &FrameProblem, snapshot: &Snapshot) -> Vec<f64> {
    snapshot
        .data
        .iter()
        .map(|assoc| {
            let warped =
                warp_point(&problem.positions[assoc.point], &problem.skins[assoc.point], field);
            assoc.normal.dot(&(warped - assoc.target))
        })
        .collect()
}

/// Euclidean 3-vector residual per sparse correspondence.
pub fn correspondence_residuals(field: &WarpField, corr: &[CorrAssociation]) -> Vec<f64> {
    let mut out = Vec::with_capacity(corr.len() * 3);
    for c in corr {
        let r = warp_point(&c.source, &c.skin, field) - c.target;
        out.extend_from_slice(&[r.x, r.y, r.z]);
    }
    out
}

/// Global-pose prior residuals: Euler-angle difference (yaw, pitch, roll
/// of the relative rotation, ZYX convention) and translation difference.
/// Near gimbal lock the rotation part falls back to the axis-angle
/// difference and is flagged.
pub struct PoseResiduals {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub gimbal_fallback: bool,
}

pub fn pose_residuals(field: &WarpField, prior: &PosePrior) -> PoseResiduals {
    let rel = field.rotation * prior.rotation.transpose();
    let (yaw, pitch, roll) = euler_zyx(&rel);
    let gimbal = (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6;
    let rotation = if gimbal {
        let v = rotation_vector(&rel);
        [v.x, v.y, v.z]
    } else {
        [yaw, pitch, roll]
    };
    let t = field.translation - prior.translation;
    PoseResiduals { rotation, translation: [t.x, t.y, t.z], gimbal_fallback: gimbal }
}

// ---- rotation helpers --------------------------------------------------

/// ZYX Euler angles (yaw about z, pitch about y, roll about x) of a
/// rotation matrix `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn euler_zyx(r: &Mat3) -> (f64, f64, f64) {
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    (yaw, pitch, roll)
}

/// Rotation vector (axis times angle) of a rotation matrix.
pub fn rotation_vector(r: &Mat3) -> Vec3 {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    nalgebra::UnitQuaternion::from_rotation_matrix(&rot).scaled_axis()
}

fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// d(yaw,pitch,roll)/d(omega) for a world-frame rotation increment
/// `exp(hat(omega)) * R`, evaluated at the given angles of `R`.
fn euler_rate_jacobian(yaw: f64, pitch: f64) -> Option<Mat3> {
    // columns map (roll_dot, pitch_dot, yaw_dot) to world angular velocity
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let e = Mat3::new(cy * cp, -sy, 0.0, sy * cp, cy, 0.0, -sp, 0.0, 1.0);
    let inv = e.try_inverse()?;
    // reorder rows to (yaw, pitch, roll)
    let mut out = Mat3::zeros();
    for (dst, src) in [(0usize, 2usize), (1, 1), (2, 0)] {
        for c in 0..3 {
            out[(dst, c)] = inv[(src, c)];
        }
    }
    Some(out)
}

/// d(log(exp(hat(omega)) * R))/d(omega) at omega = 0, where `phi` is the
/// rotation vector of `R` (inverse left Jacobian of SO(3)).
fn inverse_left_jacobian(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let px = hat(phi);
    if theta < 1e-9 {
        return Mat3::identity() - 0.5 * px + (1.0 / 12.0) * px * px;
    }
    let sin = theta.sin();
    let coeff = if sin.abs() < 1e-12 {
        1.0 / (theta * theta) // limit value near theta = pi is 1/pi^2
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * sin)
    };
    Mat3::identity() - 0.5 * px + coeff * px * px
}

/// Apply a variable-space delta: additive on node affines/translations,
/// world-frame axis-angle retraction on the global rotation.
pub fn apply_delta(field: &WarpField, delta: &[f64]) -> WarpField {
    let m = field.nodes.len();
    debug_assert_eq!(delta.len(), 12 * m + 6);
    let mut out = field.clone();
    for (j, node) in out.nodes.iter_mut().enumerate() {
        let d = &delta[12 * j..12 * j + 12];
        for p in 0..3 {
            for q in 0..3 {
                node.affine[(p, q)] += d[p * 3 + q];
            }
        }
        node.translation += Vec3::new(d[9], d[10], d[11]);
    }
    let d = &delta[12 * m..];
    let omega = Vec3::new(d[0], d[1], d[2]);
    out.rotation = nalgebra::Rotation3::new(omega).into_inner() * out.rotation;
    out.translation += Vec3::new(d[3], d[4], d[5]);
    out
}

// ---- stacked residuals and Jacobian ------------------------------------

/// Raw (unweighted) per-term energies plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub rot: f64,
    pub reg: f64,
    pub data: f64,
    pub corr: f64,
    pub pose_rot: f64,
    pub pose_trans: f64,
    pub total: f64,
}

/// Stacked weighted residual vector with its block-sparse Jacobian.
pub struct Residuals {
    pub values: Vec<f64>,
    /// One entry per residual row; blocks are disjoint within a row.
    pub rows: Vec<Vec<RowBlock>>,
    pub breakdown: EnergyBreakdown,
    pub gimbal_fallback: bool,
    /// Total scalar variable count, `12 m + 6`.
    pub variables: usize,
}

impl Residuals {
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|r| r * r).sum()
    }
}

fn sum_squares(v: &[f64]) -> f64 {
    v.iter().map(|r| r * r).sum()
}

/// Evaluate the stacked weighted residual vector without Jacobians.
/// Stacking order matches [`assemble`]: rotation, regularization, data,
/// correspondences, pose. Zero-weight terms are omitted.
pub fn residual_values(
    field: &WarpField,
    problem: &FrameProblem,
    snapshot: &Snapshot,
    params: &EnergyParams,
) -> (Vec<f64>, EnergyBreakdown) {
    let mut values = Vec::new();
    let mut bd = EnergyBreakdown::default();

    let rot = rotation_residuals(field);
    bd.rot = sum_squares(&rot);
    push_scaled(&mut values, &rot, params.w_rot);

    let reg = regularization_residuals(field, params.reg_edge_weight);
    bd.reg = sum_squares(&reg);
    push_scaled(&mut values, &reg, params.w_reg);

    let data = data_residuals(field, problem, snapshot);
    bd.data = sum_squares(&data);
    push_scaled(&mut values, &data, params.w_data);

    let corr = correspondence_residuals(field, &snapshot.corr);
    bd.corr = sum_squares(&corr);
    push_scaled(&mut values, &corr, params.w_corr);

    if let Some(prior) = &snapshot.prior {
        let pose = pose_residuals(field, prior);
        bd.pose_rot = sum_squares(&pose.rotation);
        bd.pose_trans = sum_squares(&pose.translation);
        push_scaled(&mut values, &pose.rotation, params.w_r);
        push_scaled(&mut values, &pose.translation, params.w_p);
    }

    bd.total = params.w_rot * bd.rot
        + params.w_reg * bd.reg
        + params.w_data * bd.data
        + params.w_corr * bd.corr
        + params.w_r * bd.pose_rot
        + params.w_p * bd.pose_trans;
    (values, bd)
}

fn push_scaled(values: &mut Vec<f64>, raw: &[f64], weight: f64) {
    if weight > 0.0 {
        let s = weight.sqrt();
        values.extend(raw.iter().map(|r| r * s));
    }
}

/// Evaluate the stacked weighted residuals and their analytic Jacobian.
pub fn assemble(
    field: &WarpField,
    problem: &FrameProblem,
    snapshot: &Snapshot,
    params: &EnergyParams,
) -> Residuals {
    let m = field.nodes.len();
    let pose_block = m;
    let mut values = Vec::new();
    let mut rows: Vec<Vec<RowBlock>> = Vec::new();
    let mut bd = EnergyBreakdown::default();
    let mut gimbal = false;

    // rotation term
    let rot_raw = rotation_residuals(field);
    bd.rot = sum_squares(&rot_raw);
    if params.w_rot > 0.0 {
        let s = params.w_rot.sqrt();
        for (j, node) in field.nodes.iter().enumerate() {
            let a = &node.affine;
            let cols = [a.column(0).into_owned(), a.column(1).into_owned(), a.column(2).into_owned()];
            let pairs: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
            for &(u, v) in &pairs {
                let mut block = RowBlock::node(j);
                for p in 0..3 {
                    block.values[p * 3 + u] += s * cols[v][p];
                    block.values[p * 3 + v] += s * cols[u][p];
                }
                values.push(s * cols[u].dot(&cols[v]));
                rows.push(vec![block]);
            }
            for u in 0..3 {
                let mut block = RowBlock::node(j);
                for p in 0..3 {
                    block.values[p * 3 + u] = s * 2.0 * cols[u][p];
                }
                values.push(s * (cols[u].dot(&cols[u]) - 1.0));
                rows.push(vec![block]);
            }
        }
    }

    // regularization term
    let reg_raw = regularization_residuals(field, params.reg_edge_weight);
    bd.reg = sum_squares(&reg_raw);
    if params.w_reg > 0.0 {
        let s = params.w_reg.sqrt() * params.reg_edge_weight.sqrt();
        let mut raw_iter = reg_raw.iter();
        for (j, node) in field.nodes.iter().enumerate() {
            for &k in &node.neighbors {
                let d = field.nodes[k].position - node.position;
                for r in 0..3 {
                    let mut bj = RowBlock::node(j);
                    for q in 0..3 {
                        bj.values[r * 3 + q] = s * d[q];
                    }
                    bj.values[9 + r] = s;
                    let mut bk = RowBlock::node(k);
                    bk.values[9 + r] = -s;
                    // raw values already carry sqrt(alpha)
                    values.push(params.w_reg.sqrt() * raw_iter.next().unwrap());
                    rows.push(vec![bj, bk]);
                }
            }
        }
    }

    // data term
    let data_raw = data_residuals(field, problem, snapshot);
    bd.data = sum_squares(&data_raw);
    if params.w_data > 0.0 {
        let s = params.w_data.sqrt();
        for (assoc, raw) in snapshot.data.iter().zip(&data_raw) {
            let skin = &problem.skins[assoc.point];
            let v = &problem.positions[assoc.point];
            let deformed = deform_point(v, skin, field);
            let p_cam = field.rotation * deformed;
            let rn = field.rotation.transpose() * assoc.normal;
            let mut row = Vec::with_capacity(skin.node_ids.len() + 1);
            for (&j, &w) in skin.node_ids.iter().zip(&skin.weights) {
                let dlocal = v - field.nodes[j].position;
                let mut block = RowBlock::node(j);
                for p in 0..3 {
                    for q in 0..3 {
                        block.values[p * 3 + q] = s * w * rn[p] * dlocal[q];
                    }
                    block.values[9 + p] = s * w * rn[p];
                }
                row.push(block);
            }
            let mut pose = RowBlock::pose(pose_block);
            let omega_grad = p_cam.cross(&assoc.normal);
            for i in 0..3 {
                pose.values[i] = s * omega_grad[i];
                pose.values[3 + i] = s * assoc.normal[i];
            }
            row.push(pose);
            values.push(s * raw);
            rows.push(row);
        }
    }

    // correspondence term
    let corr_raw = correspondence_residuals(field, &snapshot.corr);
    bd.corr = sum_squares(&corr_raw);
    if params.w_corr > 0.0 {
        let s = params.w_corr.sqrt();
        for (ci, c) in snapshot.corr.iter().enumerate() {
            let deformed = deform_point(&c.source, &c.skin, field);
            let p_cam = field.rotation * deformed;
            let neg_px = -hat(&p_cam);
            for r in 0..3 {
                let mut row = Vec::with_capacity(c.skin.node_ids.len() + 1);
                for (&j, &w) in c.skin.node_ids.iter().zip(&c.skin.weights) {
                    let dlocal = c.source - field.nodes[j].position;
                    let mut block = RowBlock::node(j);
                    for p in 0..3 {
                        for q in 0..3 {
                            block.values[p * 3 + q] = s * w * dlocal[q] * field.rotation[(r, p)];
                        }
                        block.values[9 + p] = s * w * field.rotation[(r, p)];
                    }
                    row.push(block);
                }
                let mut pose = RowBlock::pose(pose_block);
                for col in 0..3 {
                    pose.values[col] = s * neg_px[(r, col)];
                }
                pose.values[3 + r] = s;
                row.push(pose);
                values.push(s * corr_raw[ci * 3 + r]);
                rows.push(row);
            }
        }
    }

    // pose prior term
    if let Some(prior) = &snapshot.prior {
        let pose = pose_residuals(field, prior);
        bd.pose_rot = sum_squares(&pose.rotation);
        bd.pose_trans = sum_squares(&pose.translation);
        gimbal = pose.gimbal_fallback;
        if params.w_r > 0.0 {
            let s = params.w_r.sqrt();
            let rel = field.rotation * prior.rotation.transpose();
            let jac = if pose.gimbal_fallback {
                inverse_left_jacobian(&rotation_vector(&rel))
            } else {
                let (yaw, pitch, _) = euler_zyx(&rel);
                // pitch is bounded away from +-pi/2 here, so E is invertible
                euler_rate_jacobian(yaw, pitch).unwrap_or_else(Mat3::identity)
            };
            for r in 0..3 {
                let mut block = RowBlock::pose(pose_block);
                for col in 0..3 {
                    block.values[col] = s * jac[(r, col)];
                }
                values.push(s * pose.rotation[r]);
                rows.push(vec![block]);
            }
        }
        if params.w_p > 0.0 {
            let s = params.w_p.sqrt();
            for r in 0..3 {
                let mut block = RowBlock::pose(pose_block);
                block.values[3 + r] = s;
                values.push(s * pose.translation[r]);
                rows.push(vec![block]);
            }
        }
    }

    bd.total = params.w_rot * bd.rot
        + params.w_reg * bd.reg
        + params.w_data * bd.data
        + params.w_corr * bd.corr
        + params.w_r * bd.pose_rot
        + params.w_p * bd.pose_trans;

    Residuals { values, rows, breakdown: bd, gimbal_fallback: gimbal, variables: 12 * m + 6 }
}

/// Central finite-difference Jacobian of the stacked residual vector,
/// column by column, for verifying the analytic rows. Returns a dense
/// row-major matrix of shape (residual count, variable count).
pub fn finite_difference_jacobian(
    field: &WarpField,
    problem: &FrameProblem,
    snapshot: &Snapshot,
    params: &EnergyParams,
    step: f64,
) -> Vec<Vec<f64>> {
    let n = field.variable_count();
    let (base, _) = residual_values(field, problem, snapshot, params);
    let mut jac = vec![vec![0.0; n]; base.len()];
    let mut delta = vec![0.0; n];
    for c in 0..n {
        delta[c] = step;
        let (plus, _) = residual_values(&apply_delta(field, &delta), problem, snapshot, params);
        delta[c] = -step;
        let (minus, _) = residual_values(&apply_delta(field, &delta), problem, snapshot, params);
        delta[c] = 0.0;
        for (r, row) in jac.iter_mut().enumerate() {
            row[c] = (plus[r] - minus[r]) / (2.0 * step);
        }
    }
    jac
}

/// Expand block rows into a dense row-major Jacobian (tests and small
/// problems only).
pub fn dense_jacobian(res: &Residuals, node_count: usize) -> Vec<Vec<f64>> {
    let n = 12 * node_count + 6;
    let mut out = vec![vec![0.0; n]; res.rows.len()];
    for (r, row) in res.rows.iter().enumerate() {
        for block in row {
            let offset = if block.block == node_count { 12 * node_count } else { 12 * block.block };
            for i in 0..block.width {
                out[r][offset + i] += block.values[i];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Grid};
    use crate::warpfield::EdNode;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_field(nodes: Vec<EdNode>, skin_count: usize) -> WarpField {
        WarpField {
            nodes,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            skin_count,
            grid: 10.0,
        }
    }

    fn plane_scan(z: f64) -> DepthScan {
        let k = CameraIntrinsics::new(100.0, 100.0, 16.0, 12.0, 32, 24).unwrap();
        let depth = Grid::filled(32, 24, z);
        let color = Grid::filled(32, 24, [128u8; 3]);
        DepthScan::from_depth_color(depth, color, k, 0).unwrap()
    }

    #[test]
    fn rotation_residuals_identity_and_scaled() {
        let mut field = identity_field(vec![EdNode::at(Vec3::zeros())], 1);
        let r = rotation_residuals(&field);
        assert!(r.iter().all(|&v| v == 0.0));

        field.nodes[0].affine = 2.0 * Mat3::identity();
        let r = rotation_residuals(&field);
        assert_relative_eq!(sum_squares(&r), 27.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_residuals_vanish_for_rotations() {
        let mut field = identity_field(vec![EdNode::at(Vec3::zeros())], 1);
        field.nodes[0].affine = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Vector3::z_axis(),
            30f64.to_radians(),
        )
        .into_inner();
        assert!(sum_squares(&rotation_residuals(&field)) < 1e-12);
    }

    #[test]
    fn regularization_zero_for_shared_translation() {
        let mut n0 = EdNode::at(Vec3::zeros());
        let mut n1 = EdNode::at(Vec3::new(1.0, 0.0, 0.0));
        n0.neighbors = vec![1];
        n1.neighbors = vec![0];
        n0.translation = Vec3::new(0.5, -0.5, 2.0);
        n1.translation = Vec3::new(0.5, -0.5, 2.0);
        let field = identity_field(vec![n0, n1], 2);
        assert!(sum_squares(&regularization_residuals(&field, 1.0)) < 1e-24);
    }

    #[test]
    fn regularization_hand_computed_pair() {
        let mut n0 = EdNode::at(Vec3::zeros());
        let mut n1 = EdNode::at(Vec3::new(1.0, 0.0, 0.0));
        n0.neighbors = vec![1];
        n1.neighbors = vec![0];
        n1.translation = Vec3::new(0.1, 0.0, 0.0);
        let field = identity_field(vec![n0, n1], 2);
        let e = sum_squares(&regularization_residuals(&field, 1.0));
        assert_relative_eq!(e, 0.02, epsilon = 1e-12);
    }

    #[test]
    fn regularization_zero_for_rigid_consistent_nodes() {
        let q = nalgebra::Rotation3::from_euler_angles(0.2, -0.4, 0.1).into_inner();
        let c = Vec3::new(0.5, 1.0, -2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut nodes: Vec<EdNode> = (0..5)
            .map(|_| {
                let g = Vec3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                );
                let mut n = EdNode::at(g);
                n.affine = q;
                n.translation = (q - Mat3::identity()) * g + c;
                n
            })
            .collect();
        for j in 0..5 {
            nodes[j].neighbors = (0..5).filter(|&k| k != j).collect();
        }
        let field = identity_field(nodes, 4);
        assert!(sum_squares(&regularization_residuals(&field, 1.0)) < 1e-18);
    }

    /// Scan of a fronto-parallel plane plus model points lying on it.
    fn plane_problem(z: f64) -> (DepthScan, Vec<Vec3>, Vec<Vec3>) {
        let scan = plane_scan(z);
        let mut positions = Vec::new();
        let mut normals = Vec::new();
        for y in (2..22).step_by(4) {
            for x in (2..30).step_by(4) {
                positions.push(scan.lift_pixel(x, y).unwrap());
                normals.push(Vec3::new(0.0, 0.0, -1.0));
            }
        }
        (scan, positions, normals)
    }

    fn skins_for(positions: &[Vec3], field: &WarpField) -> Vec<Skinning> {
        positions.iter().map(|p| compute_skinning(p, field)).collect()
    }

    #[test]
    fn visibility_gates() {
        let (scan, mut positions, normals) = plane_problem(50.0);
        let field = identity_field(vec![EdNode::at(Vec3::new(0.0, 0.0, 50.0))], 1);
        let params = EnergyParams::default();
        // on-surface points are visible
        let skins = skins_for(&positions, &field);
        let problem = FrameProblem { positions: &positions, normals: &normals, skins: &skins, scan: &scan };
        let visible = predict_visible(&problem, &field, &params);
        assert_eq!(visible.len(), positions.len());

        // 20 mm depth offset exceeds the 15 mm gate
        positions[0].z += 20.0;
        let skins = skins_for(&positions, &field);
        let problem = FrameProblem { positions: &positions, normals: &normals, skins: &skins, scan: &scan };
        let visible = predict_visible(&problem, &field, &params);
        assert!(!visible.contains(&0));
        positions[0].z -= 20.0;

        // a normal 15 degrees off exceeds the 10 degree gate
        let mut tilted = normals.clone();
        tilted[1] = Vec3::new(15f64.to_radians().sin(), 0.0, -(15f64.to_radians().cos()));
        let skins = skins_for(&positions, &field);
        let problem = FrameProblem { positions: &positions, normals: &tilted, skins: &skins, scan: &scan };
        let visible = predict_visible(&problem, &field, &params);
        assert!(!visible.contains(&1));
        assert!(visible.contains(&2));
    }

    #[test]
    fn data_residual_zero_on_surface_and_two_off() {
        let (scan, mut positions, normals) = plane_problem(50.0);
        positions[3].z = 52.0;
        let field = identity_field(vec![EdNode::at(Vec3::new(0.0, 0.0, 50.0))], 1);
        let params = EnergyParams::default();
        let skins = skins_for(&positions, &field);
        let problem = FrameProblem { positions: &positions, normals: &normals, skins: &skins, scan: &scan };
        let snapshot = build_snapshot(&problem, &field, &params, &[], None);
        let r = data_residuals(&field, &problem, &snapshot);
        // point 3 reads -2 against the camera-facing plane normal (0,0,-1)
        let idx = snapshot.data.iter().position(|a| a.point == 3).unwrap();
        assert_relative_eq!(r[idx], -2.0, epsilon = 1e-9);
        for (i, assoc) in snapshot.data.iter().enumerate() {
            if assoc.point != 3 {
                assert!(r[i].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn data_residual_ignores_tangential_offsets() {
        let (scan, positions, normals) = plane_problem(50.0);
        let field = identity_field(vec![EdNode::at(Vec3::new(0.0, 0.0, 50.0))], 1);
        let params = EnergyParams::default();
        let skins = skins_for(&positions, &field);
        let problem = FrameProblem { positions: &positions, normals: &normals, skins: &skins, scan: &scan };
        let snapshot = build_snapshot(&problem, &field, &params, &[], None);
        let base = data_residuals(&field, &problem, &snapshot);

        let mut shifted = positions.clone();
        for p in &mut shifted {
            p.x += 1.0;
        }
        let skins2 = skins_for(&shifted, &field);
        let problem2 = FrameProblem { positions: &shifted, normals: &normals, skins: &skins2, scan: &scan };
        let snapshot2 = build_snapshot(&problem2, &field, &params, &[], None);
        let moved = data_residuals(&field, &problem2, &snapshot2);
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn correspondence_residuals_directly() {
        let field = identity_field(vec![EdNode::at(Vec3::zeros())], 1);
        let source = Vec3::new(1.0, 2.0, 3.0);
        let corr = vec![CorrAssociation {
            skin: compute_skinning(&source, &field),
            source,
            target: source,
        }];
        assert!(sum_squares(&correspondence_residuals(&field, &corr)) < 1e-24);

        let mut shifted = field.clone();
        shifted.translation = Vec3::new(1.0, 0.0, 0.0);
        let r = correspondence_residuals(&shifted, &corr);
        assert_relative_eq!(r[0], 1.0);
        assert_relative_eq!(r[1], 0.0);
        assert_relative_eq!(r[2], 0.0);
    }

    #[test]
    fn correspondence_matches_recomputation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let nodes: Vec<EdNode> = (0..4)
            .map(|_| {
                let mut n = EdNode::at(Vec3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(40.0..60.0),
                ));
                for p in 0..3 {
                    for q in 0..3 {
                        n.affine[(p, q)] += rng.random_range(-0.1..0.1);
                    }
                }
                n.translation = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                n
            })
            .collect();
        let mut field = identity_field(nodes, 3);
        field.rotation = nalgebra::Rotation3::from_euler_angles(0.05, -0.02, 0.1).into_inner();
        field.translation = Vec3::new(0.4, -0.3, 1.0);
        for _ in 0..10 {
            let source = Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(40.0..60.0),
            );
            let target = Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(40.0..60.0),
            );
            let skin = compute_skinning(&source, &field);
            let corr = vec![CorrAssociation { skin: skin.clone(), source, target }];
            let r = correspondence_residuals(&field, &corr);
            // independent re-evaluation of the warp equation
            let mut blended = Vec3::zeros();
            for (&j, &w) in skin.node_ids.iter().zip(&skin.weights) {
                let n = &field.nodes[j];
                blended += w * (n.affine * (source - n.position) + n.position + n.translation);
            }
            let expected = field.rotation * blended + field.translation - target;
            assert_eq!(r, vec![expected.x, expected.y, expected.z]);
        }
    }

    #[test]
    fn pose_residuals_zero_offset_and_yaw() {
        let field = identity_field(vec![EdNode::at(Vec3::zeros())], 1);
        let prior = PosePrior {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            frame_index: 0,
        };
        let r = pose_residuals(&field, &prior);
        assert!(sum_squares(&r.rotation) < 1e-24 && sum_squares(&r.translation) < 1e-24);

        let mut offset = field.clone();
        offset.translation = Vec3::new(1.0, 2.0, 3.0);
        let r = pose_residuals(&offset, &prior);
        assert_eq!(r.translation, [1.0, 2.0, 3.0]);

        let mut yawed = field.clone();
        yawed.rotation =
            nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), 10f64.to_radians())
                .into_inner();
        let r = pose_residuals(&yawed, &prior);
        assert!((r.rotation[0] - 10f64.to_radians()).abs() < 1e-9);
        assert!(r.rotation[1].abs() < 1e-9 && r.rotation[2].abs() < 1e-9);
        assert!(!r.gimbal_fallback);
    }

    #[test]
    fn pose_residuals_gimbal_fallback() {
        let mut field = identity_field(vec![EdNode::at(Vec3::zeros())], 1);
        field.rotation =
            nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::y_axis(), std::f64::consts::FRAC_PI_2)
                .into_inner();
        let prior = PosePrior {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            frame_index: 0,
        };
        let r = pose_residuals(&field, &prior);
        assert!(r.gimbal_fallback);
        // axis-angle difference: pi/2 about y
        assert!((r.rotation[1] - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn euler_zyx_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let yaw = rng.random_range(-3.0..3.0);
            let pitch = rng.random_range(-1.4..1.4);
            let roll = rng.random_range(-3.0..3.0);
            let r = (nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), yaw)
                * nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::y_axis(), pitch)
                * nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::x_axis(), roll))
            .into_inner();
            let (y, p, ro) = euler_zyx(&r);
            assert!((y - yaw).abs() < 1e-9 && (p - pitch).abs() < 1e-9 && (ro - roll).abs() < 1e-9);
        }
    }

    /// Random small instance with every term active.
    fn random_instance(seed: u64) -> (WarpField, DepthScan, Vec<Vec3>, Vec<Vec3>, Vec<FeatureCorrespondence>, PosePrior) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scan = plane_scan(50.0);
        let mut nodes: Vec<EdNode> = (0..4)
            .map(|i| {
                let mut n = EdNode::at(Vec3::new(
                    -6.0 + 4.0 * i as f64 + rng.random_range(-0.5..0.5),
                    rng.random_range(-4.0..4.0),
                    50.0 + rng.random_range(-1.0..1.0),
                ));
                for p in 0..3 {
                    for q in 0..3 {
                        n.affine[(p, q)] += rng.random_range(-0.05..0.05);
                    }
                }
                n.translation = Vec3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                );
                n
            })
            .collect();
        for j in 0..4 {
            nodes[j].neighbors = (0..4).filter(|&k| k != j).take(2).collect();
        }
        let rotation = nalgebra::Rotation3::from_euler_angles(
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        )
        .into_inner();
        let field = WarpField {
            nodes,
            rotation,
            translation: Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
            skin_count: 3,
            grid: 4.0,
        };
        let mut positions = Vec::new();
        let mut normals = Vec::new();
        for i in 0..10 {
            let x = 4 + (i % 5) * 5;
            let y = 4 + (i / 5) * 8;
            let mut p = scan.lift_pixel(x, y).unwrap();
            p.z += rng.random_range(-0.5..0.5);
            positions.push(p);
            normals.push(Vec3::new(0.0, 0.0, -1.0));
        }
        let corr: Vec<FeatureCorrespondence> = (0..2)
            .map(|id| FeatureCorrespondence {
                id,
                source: Vec3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-4.0..4.0),
                    50.0 + rng.random_range(-0.5..0.5),
                ),
                target: Vec3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-4.0..4.0),
                    50.0 + rng.random_range(-0.5..0.5),
                ),
            })
            .collect();
        let prior = PosePrior {
            rotation: nalgebra::Rotation3::from_euler_angles(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            )
            .into_inner(),
            translation: Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            frame_index: 0,
        };
        (field, scan, positions, normals, corr, prior)
    }

    #[test]
    fn total_energy_matches_term_sum() {
        let (field, scan, positions, normals, corr, prior) = random_instance(42);
        let params = EnergyParams::default();
        let skins = skins_for(&positions, &field);
        let problem = FrameProblem { positions: &positions, normals: &normals, skins: &skins, scan: &scan };
        let snapshot = build_snapshot(&problem, &field, &params, &corr, Some(&prior));
        assert!(!snapshot.data.is_empty());
        let res = assemble(&field, &problem, &snapshot, &params);
        let bd = res.breakdown;
        let recomputed = params.w_rot * bd.rot
            + params.w_reg * bd.reg
            + params.w_data * bd.data
            + params.w_corr * bd.corr
            + params.w_r * bd.pose_rot
            + params.w_p * bd.pose_trans;
        let scale = res.energy().max(1.0);
        assert!((res.energy() - recomputed).abs() / scale < 1e-10);
        assert!(res.energy() >= 0.0);
        // values-only evaluation agrees with the assembled residuals
        let (values, _) = residual_values(&field, &problem, &snapshot, &params);
        assert_eq!(values, res.values);
        assert_eq!(res.rows.len(), res.values.len());
        assert_eq!(res.variables, 12 * 4 + 6);
    }

    #[test]
    fn perfectly_aligned_identity_problem_has_zero_energy() {
        let (scan, positions, normals) = plane_problem(50.0);
        let field = WarpField::from_points(&positions, 8.0, 3, 3).unwrap();
        let params = EnergyParams::default();
        let skins = skins_for(&positions, &field);
        let problem = FrameProblem { positions: &positions, normals: &normals, skins: &skins, scan: &scan };
        let prior = PosePrior { rotation: Mat3::identity(), translation: Vec3::zeros(), frame_index: 0 };
        let snapshot = build_snapshot(&problem, &field, &params, &[], Some(&prior));
        let res = assemble(&field, &problem, &snapshot, &params);
        assert!(res.energy() < 1e-10, "energy {}", res.energy());
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        for seed in [1u64, 2, 3] {
            let (field, scan, positions, normals, corr, prior) = random_instance(seed);
            let params = EnergyParams::default();
            let skins = skins_for(&positions, &field);
            let problem =
                FrameProblem { positions: &positions, normals: &normals, skins: &skins, scan: &scan };
            let snapshot = build_snapshot(&problem, &field, &params, &corr, Some(&prior));
            assert!(!snapshot.data.is_empty(), "seed {seed} produced no data rows");
            let res = assemble(&field, &problem, &snapshot, &params);
            let analytic = dense_jacobian(&res, field.nodes.len());
            let numeric = finite_difference_jacobian(&field, &problem, &snapshot, &params, 1e-5);
            let mut worst = 0.0f64;
            for (ra, rn) in analytic.iter().zip(&numeric) {
                for (a, b) in ra.iter().zip(rn) {
                    let denom = a.abs().max(b.abs()).max(1.0);
                    worst = worst.max((a - b).abs() / denom);
                }
            }
            assert!(worst < 1e-4, "seed {seed}: max relative error {worst}");
        }
    }

    #[test]
    fn gimbal_fallback_jacobian_matches_finite_differences() {
        let (mut field, scan, positions, normals, _, _) = random_instance(9);
        field.rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Vector3::y_axis(),
            std::f64::consts::FRAC_PI_2,
        )
        .into_inner();
        let prior = PosePrior { rotation: Mat3::identity(), translation: Vec3::zeros(), frame_index: 0 };
        let params = EnergyParams { w_data: 0.0, w_corr: 0.0, ..EnergyParams::default() };
        let skins = skins_for(&positions, &field);
        let problem = FrameProblem { positions: &positions, normals: &normals, skins: &skins, scan: &scan };
        let snapshot = build_snapshot(&problem, &field, &params, &[], Some(&prior));
        let res = assemble(&field, &problem, &snapshot, &params);
        assert!(res.gimbal_fallback);
        let analytic = dense_jacobian(&res, field.nodes.len());
        // small step keeps every perturbed evaluation on the fallback branch
        let numeric = finite_difference_jacobian(&field, &problem, &snapshot, &params, 1e-8);
        for (ra, rn) in analytic.iter().zip(&numeric) {
            for (a, b) in ra.iter().zip(rn) {
                let denom = a.abs().max(b.abs()).max(1.0);
                assert!((a - b).abs() / denom < 1e-4);
            }
        }
    }
}

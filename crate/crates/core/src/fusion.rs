//! Model maintenance: projective point-to-depth registration, the
//! deform-and-fuse update, and point filtering/downsampling.
//!
//! Fusing a frame commits the solved node deformation into the point
//! positions (the model lives in the world frame; the global pose is the
//! camera), updates registered points by running weighted averages along
//! their pixel rays, and lifts unclaimed scan pixels into new unstable
//! points.

use std::collections::BTreeMap;

use crate::geometry::{back_project, project, DepthScan, Grid};
use crate::warpfield::{compute_skinning, deform_normal, deform_point, warp_normal, Skinning, WarpField};
use crate::{Error, Result, Vec3};

/// One surface element of the point model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPoint {
    /// Position in the model (world) frame, mm.
    pub position: Vec3,
    /// Fusion weight, capped at the configured maximum.
    pub weight: f64,
    /// RGB in 0..=255, kept fractional for exact running averages.
    pub color: [f64; 3],
    /// Frame index of the last observation.
    pub time_stamp: usize,
    /// Confirmed by enough observations to count as surface.
    pub stable: bool,
    /// Unit normal in the model frame.
    pub normal: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    /// Truncation gate on the z difference for the distance weight, mm.
    pub truncation: f64,
    /// Registration gate on the z difference, mm.
    pub depth_gate: f64,
    /// Registration gate on the normal angle, degrees.
    pub angle_gate_deg: f64,
    /// Upper bound on fusion weights.
    pub weight_cap: f64,
    /// Frames a point may go unseen before it can be pruned.
    pub time_window: usize,
    /// Weight at and above which a point counts as stable.
    pub stable_weight: f64,
    /// Downsampling cell size, mm.
    pub point_grid: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            truncation: 40.0,
            depth_gate: 10.0,
            angle_gate_deg: 10.0,
            weight_cap: 10.0,
            time_window: 10,
            stable_weight: 3.0,
            point_grid: 1.0,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.truncation,
            self.depth_gate,
            self.angle_gate_deg,
            self.weight_cap,
            self.stable_weight,
            self.point_grid,
        ];
        if positive.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("fusion parameters must be positive".into()));
        }
        if self.weight_cap < 1.0 {
            return Err(Error::Config("weight cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mutually consistent point-to-pixel and pixel-to-point association.
#[derive(Debug, Clone)]
pub struct RegistrationMap {
    pub point_to_pixel: Vec<Option<(usize, usize)>>,
    pub pixel_to_point: Grid<Option<u32>>,
}

impl RegistrationMap {
    pub fn registered_count(&self) -> usize {
        self.point_to_pixel.iter().filter(|p| p.is_some()).count()
    }

    /// Both directions agree: a registered pixel's point maps back to it.
    pub fn is_consistent(&self) -> bool {
        for (i, px) in self.point_to_pixel.iter().enumerate() {
            if let Some((x, y)) = px {
                if *self.pixel_to_point.get(*x, *y) != Some(i as u32) {
                    return false;
                }
            }
        }
        let mut seen = 0;
        for y in 0..self.pixel_to_point.height {
            for x in 0..self.pixel_to_point.width {
                if let Some(i) = self.pixel_to_point.get(x, y) {
                    if self.point_to_pixel[*i as usize] != Some((x, y)) {
                        return false;
                    }
                    seen += 1;
                }
            }
        }
        seen == self.registered_count()
    }
}

/// Warp every model point and register it to the pixel it projects onto,
/// gated on depth difference and normal agreement. When two points claim
/// one pixel the smaller z difference wins (ties to the lower index) and
/// the loser stays unregistered.
pub fn register(
    model: &[ModelPoint],
    skins: &[Skinning],
    field: &WarpField,
    scan: &DepthScan,
    params: &FusionParams,
) -> RegistrationMap {
    let cos_gate = params.angle_gate_deg.to_radians().cos();
    let mut point_to_pixel = vec![None; model.len()];
    let mut best: Grid<Option<(u32, f64)>> = Grid::filled(scan.width(), scan.height(), None);
    for (i, (point, skin)) in model.iter().zip(skins).enumerate() {
        let warped = field.rotation * deform_point(&point.position, skin, field) + field.translation;
        if warped.z <= 0.0 {
            continue;
        }
        let Ok(px) = project(&warped, &scan.intrinsics) else { continue };
        let Some((x, y)) = scan.intrinsics.nearest_pixel(px.u, px.v) else { continue };
        if !scan.pixel_is_valid(x, y) {
            continue;
        }
        let dz = (warped.z - scan.depth.get(x, y)).abs();
        if dz >= params.depth_gate {
            continue;
        }
        let Ok(warped_normal) = warp_normal(&point.normal, skin, field) else { continue };
        if warped_normal.dot(scan.normals.get(x, y)) <= cos_gate {
            continue;
        }
        let slot = best.get_mut(x, y);
        match slot {
            Some((prev, prev_dz)) if *prev_dz <= dz => {
                let _ = prev;
            }
            _ => *slot = Some((i as u32, dz)),
        }
    }
    let mut pixel_to_point = Grid::filled(scan.width(), scan.height(), None);
    for y in 0..scan.height() {
        for x in 0..scan.width() {
            if let Some((i, _)) = best.get(x, y) {
                *pixel_to_point.get_mut(x, y) = Some(*i);
                point_to_pixel[*i as usize] = Some((x, y));
            }
        }
    }
    RegistrationMap { point_to_pixel, pixel_to_point }
}

/// Truncated signed distance weight of a registered point: its distance to
/// the nearest node over half the node grid size, zeroed when the depth
/// difference at its pixel exceeds the truncation gate.
pub fn tsdw(
    point: &ModelPoint,
    skin: &Skinning,
    field: &WarpField,
    scan: &DepthScan,
    params: &FusionParams,
) -> f64 {
    let warped = field.rotation * deform_point(&point.position, skin, field) + field.translation;
    if warped.z <= 0.0 {
        return 0.0;
    }
    let Ok(px) = project(&warped, &scan.intrinsics) else { return 0.0 };
    let Some((x, y)) = scan.intrinsics.nearest_pixel(px.u, px.v) else { return 0.0 };
    let depth = *scan.depth.get(x, y);
    if !crate::geometry::depth_is_valid(depth) || (warped.z - depth).abs() >= params.truncation {
        return 0.0;
    }
    let d_min = field
        .nodes
        .iter()
        .map(|n| (n.position - point.position).norm())
        .fold(f64::INFINITY, f64::min);
    d_min / (0.5 * field.grid)
}

/// Counters from one fusion step. Every valid scan pixel is either
/// registered to exactly one point or spawns exactly one new point, so
/// `registered + new_points == valid_pixels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionOutcome {
    pub registered: usize,
    pub new_points: usize,
    pub valid_pixels: usize,
}

fn lift_new_point(scan: &DepthScan, field: &WarpField, x: usize, y: usize, frame: usize) -> ModelPoint {
    let cam = back_project(x as f64, y as f64, *scan.depth.get(x, y), &scan.intrinsics).unwrap();
    let color = scan.color.get(x, y);
    ModelPoint {
        position: field.rigid_inverse(&cam),
        weight: 1.0,
        color: [color[0] as f64, color[1] as f64, color[2] as f64],
        time_stamp: frame,
        stable: false,
        normal: field.rotation.transpose() * scan.normals.get(x, y),
    }
}

/// Initialize a model from every valid pixel of a scan (the first-frame
/// bootstrap), in the model frame implied by the field's pose.
pub fn lift_scan(scan: &DepthScan, field: &WarpField, frame: usize) -> Vec<ModelPoint> {
    let mut model = Vec::new();
    for y in 0..scan.height() {
        for x in 0..scan.width() {
            if scan.pixel_is_valid(x, y) {
                model.push(lift_new_point(scan, field, x, y, frame));
            }
        }
    }
    model
}

/// Deform-and-fuse update. The node deformation is committed into every
/// point; registered points are fused with their pixel by running
/// weighted averages (position along the pixel's back-projection ray) and
/// re-stamped; unregistered valid pixels are lifted into new unstable
/// points.
pub fn fuse_frame(
    model: &[ModelPoint],
    skins: &[Skinning],
    field: &WarpField,
    scan: &DepthScan,
    reg: &RegistrationMap,
    params: &FusionParams,
    frame: usize,
) -> (Vec<ModelPoint>, FusionOutcome) {
    debug_assert_eq!(model.len(), skins.len());
    debug_assert_eq!(model.len(), reg.point_to_pixel.len());
    let mut out = Vec::with_capacity(model.len());
    let mut registered = 0;
    for ((point, skin), hit) in model.iter().zip(skins).zip(&reg.point_to_pixel) {
        let mut p = point.clone();
        p.position = deform_point(&point.position, skin, field);
        let deformed_normal = deform_normal(&point.normal, skin, field);
        if deformed_normal.norm() > 1e-12 {
            p.normal = deformed_normal.normalize();
        }
        if let Some((x, y)) = *hit {
            registered += 1;
            let warped = field.rigid(&p.position);
            let depth = *scan.depth.get(x, y);
            let w = point.weight;
            let fused_z = (warped.z * w + depth) / (w + 1.0);
            let cam = back_project(x as f64, y as f64, fused_z, &scan.intrinsics).unwrap();
            p.position = field.rigid_inverse(&cam);
            let scan_color = scan.color.get(x, y);
            for (c, &s) in p.color.iter_mut().zip(scan_color.iter()) {
                *c = (*c * w + s as f64) / (w + 1.0);
            }
            let scan_normal = field.rotation.transpose() * scan.normals.get(x, y);
            let blended = (p.normal * w + scan_normal) / (w + 1.0);
            if blended.norm() > 1e-12 {
                p.normal = blended.normalize();
            }
            p.weight = (w + 1.0).min(params.weight_cap);
            p.time_stamp = frame;
        }
        out.push(p);
    }
    let mut new_points = 0;
    let mut valid_pixels = 0;
    for y in 0..scan.height() {
        for x in 0..scan.width() {
            if !scan.pixel_is_valid(x, y) {
                continue;
            }
            valid_pixels += 1;
            if reg.pixel_to_point.get(x, y).is_none() {
                out.push(lift_new_point(scan, field, x, y, frame));
                new_points += 1;
            }
        }
    }
    (out, FusionOutcome { registered, new_points, valid_pixels })
}

fn cell_of(p: &Vec3, grid: f64) -> (i64, i64, i64) {
    ((p.x / grid).floor() as i64, (p.y / grid).floor() as i64, (p.z / grid).floor() as i64)
}

/// Downsample into grid cells (weight-averaged position/color/normal,
/// summed capped weight, newest time stamp), prune points that are both
/// stale and weak, and refresh stability flags.
pub fn filter_points(model: &[ModelPoint], frame: usize, params: &FusionParams) -> Vec<ModelPoint> {
    struct Cell {
        weight_sum: f64,
        position: Vec3,
        color: [f64; 3],
        normal: Vec3,
        time_stamp: usize,
        first_normal: Vec3,
    }
    let mut cells: BTreeMap<(i64, i64, i64), Cell> = BTreeMap::new();
    for p in model {
        let key = cell_of(&p.position, params.point_grid);
        let cell = cells.entry(key).or_insert_with(|| Cell {
            weight_sum: 0.0,
            position: Vec3::zeros(),
            color: [0.0; 3],
            normal: Vec3::zeros(),
            time_stamp: 0,
            first_normal: p.normal,
        });
        cell.weight_sum += p.weight;
        cell.position += p.weight * p.position;
        for (acc, c) in cell.color.iter_mut().zip(&p.color) {
            *acc += p.weight * c;
        }
        cell.normal += p.weight * p.normal;
        cell.time_stamp = cell.time_stamp.max(p.time_stamp);
    }
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells.into_values() {
        if cell.weight_sum <= 0.0 {
            continue;
        }
        let weight = cell.weight_sum.min(params.weight_cap);
        let stale = cell.time_stamp + params.time_window < frame;
        if stale && weight < params.stable_weight {
            continue;
        }
        let normal = if cell.normal.norm() > 1e-12 {
            cell.normal.normalize()
        } else {
            cell.first_normal
        };
        out.push(ModelPoint {
            position: cell.position / cell.weight_sum,
            weight,
            color: cell.color.map(|c| c / cell.weight_sum),
            time_stamp: cell.time_stamp,
            stable: weight >= params.stable_weight,
            normal,
        });
    }
    out
}

/// Skinning for every model point against the current node graph.
pub fn compute_model_skinning(model: &[ModelPoint], field: &WarpField) -> Vec<Skinning> {
    model.iter().map(|p| compute_skinning(&p.position, field)).collect()
}

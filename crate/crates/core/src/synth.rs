//! Synthetic ground-truth generation: deforming parametric height-field
//! surfaces, a virtual scanning camera on a trajectory, depth noise, and a
//! simulated pose/feature feed.
//!
//! Everything is a deterministic function of `(SceneSpec, frame)`, so
//! renders are bit-reproducible under a fixed seed. Surfaces are analytic,
//! which gives exact oracles: per-pixel depth can be checked against the
//! closed-form surface equation, and fused models can be scored against
//! dense surface samples. External reference models (e.g. ASCII PLY
//! organ meshes) can stand in for the parametric surfaces by building a
//! [`TruthFrame`] from their points via [`TruthFrame::from_points`].

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{CameraIntrinsics, DepthScan, Grid};
use crate::io::kv;
use crate::posefeed::{FeatureCorrespondence, FrameEnvelope, PosePrior};
use crate::{Error, Mat3, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    Plane,
    SinusoidalSheet,
    Hemisphere,
}

/// Camera path over the sequence, in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    Static,
    /// Per-frame camera-center translation and per-frame rotation
    /// increments (degrees about x, y, z), both accumulating linearly.
    Linear { translation_per_frame: Vec3, rotation_per_frame_deg: Vec3 },
    /// Seeded tangential jumps of fixed magnitude per frame (the
    /// fast-motion scenario).
    RandomJumps { magnitude: f64 },
    /// Smooth bounded wander with the given per-axis amplitudes and
    /// period in frames.
    Oscillate { amplitude: Vec3, rotation_amp_deg: Vec3, period: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub kind: SurfaceKind,
    /// Surface footprint side (sheet/plane) or dome diameter, mm.
    pub extent: f64,
    /// Nominal camera-to-surface distance, mm.
    pub standoff: f64,
    /// Temporal deformation amplitude, mm.
    pub amplitude: f64,
    /// Deformation cycles per frame.
    pub temporal_freq: f64,
    /// Spatial wavelength of the sheet pattern, mm.
    pub spatial_wavelength: f64,
    /// Range of the per-frame random localized perturbation, mm
    /// (0 disables).
    pub bump_min: f64,
    pub bump_max: f64,
    /// Radius of the localized perturbation, mm.
    pub bump_sigma: f64,
    pub trajectory: Trajectory,
    /// Gaussian depth noise sigma, mm.
    pub depth_noise_sigma: f64,
    pub frames: usize,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    /// Tracked sparse features per frame.
    pub feature_count: usize,
    /// Optional perturbation of the pose prior fed downstream.
    pub prior_rot_noise_deg: f64,
    pub prior_trans_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kind: SurfaceKind::SinusoidalSheet,
            extent: 40.0,
            standoff: 50.0,
            amplitude: 2.5,
            temporal_freq: 0.05,
            spatial_wavelength: 20.0,
            bump_min: 0.0,
            bump_max: 0.0,
            bump_sigma: 5.0,
            trajectory: Trajectory::Static,
            depth_noise_sigma: 0.0,
            frames: 30,
            seed: 0,
            intrinsics: CameraIntrinsics::new(400.0, 400.0, 160.0, 120.0, 320, 240).unwrap(),
            feature_count: 24,
            prior_rot_noise_deg: 0.0,
            prior_trans_noise: 0.0,
        }
    }
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

const TAG_BUMPS: u64 = 1;
const TAG_FEATURES: u64 = 2;
const TAG_JUMPS: u64 = 3;
const TAG_NOISE_BASE: u64 = 1000;
const TAG_PRIOR_BASE: u64 = 2_000_000;

#[derive(Debug, Clone, Copy)]
struct Bump {
    x: f64,
    y: f64,
    amplitude: f64,
    sigma: f64,
}

/// Analytic surface state at one frame: base shape, temporal phase, and
/// the accumulated localized perturbations.
struct Surface<'a> {
    spec: &'a SceneSpec,
    phase: f64,
    bumps: Vec<Bump>,
}

impl<'a> Surface<'a> {
    fn at_frame(spec: &'a SceneSpec, frame: usize) -> Self {
        let phase = 2.0 * std::f64::consts::PI * spec.temporal_freq * frame as f64;
        let mut bumps = Vec::new();
        if spec.bump_max > 0.0 {
            let mut rng = stream(spec.seed, TAG_BUMPS);
            let inner = spec.extent * 0.4;
            for _ in 0..frame {
                let x = rng.random_range(-inner..inner);
                let y = rng.random_range(-inner..inner);
                let magnitude = rng.random_range(spec.bump_min..=spec.bump_max);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                bumps.push(Bump { x, y, amplitude: sign * magnitude, sigma: spec.bump_sigma });
            }
        }
        Self { spec, phase, bumps }
    }

    fn in_domain(&self, x: f64, y: f64) -> bool {
        let half = self.spec.extent / 2.0;
        match self.spec.kind {
            SurfaceKind::Plane | SurfaceKind::SinusoidalSheet => {
                x.abs() <= half && y.abs() <= half
            }
            SurfaceKind::Hemisphere => (x * x + y * y).sqrt() <= 0.97 * half,
        }
    }

    /// Height (camera-axis distance) of the surface above the z = 0 plane,
    /// mathematically extended outside the domain where possible.
    fn height(&self, x: f64, y: f64) -> Option<f64> {
        let s = self.spec;
        let base = match s.kind {
            SurfaceKind::Plane => s.standoff,
            SurfaceKind::SinusoidalSheet => {
                let k = 2.0 * std::f64::consts::PI / s.spatial_wavelength;
                s.standoff + s.amplitude * (k * x + self.phase).sin() * (k * y).cos()
            }
            SurfaceKind::Hemisphere => {
                let r = s.extent / 2.0;
                let rho2 = x * x + y * y;
                if rho2 >= (0.97 * r) * (0.97 * r) {
                    return None;
                }
                let cap = s.standoff + r - (r * r - rho2).sqrt();
                cap - s.amplitude * self.phase.sin() * (1.0 - rho2 / (r * r))
            }
        };
        let mut h = base;
        for b in &self.bumps {
            let dx = x - b.x;
            let dy = y - b.y;
            h += b.amplitude * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
        }
        Some(h)
    }

    fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.spec;
        let (mut hx, mut hy) = match s.kind {
            SurfaceKind::Plane => (0.0, 0.0),
            SurfaceKind::SinusoidalSheet => {
                let k = 2.0 * std::f64::consts::PI / s.spatial_wavelength;
                (
                    s.amplitude * k * (k * x + self.phase).cos() * (k * y).cos(),
                    -s.amplitude * k * (k * x + self.phase).sin() * (k * y).sin(),
                )
            }
            SurfaceKind::Hemisphere => {
                let r = s.extent / 2.0;
                let rho2 = x * x + y * y;
                let root = (r * r - rho2).max(1e-9).sqrt();
                let pulse = 2.0 * s.amplitude * self.phase.sin() / (r * r);
                (x / root + pulse * x, y / root + pulse * y)
            }
        };
        for b in &self.bumps {
            let dx = x - b.x;
            let dy = y - b.y;
            let g = b.amplitude * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
            hx += g * (-dx / (b.sigma * b.sigma));
            hy += g * (-dy / (b.sigma * b.sigma));
        }
        (hx, hy)
    }

    /// Unit normal oriented toward the camera side (negative z).
    fn normal(&self, x: f64, y: f64) -> Vec3 {
        let (hx, hy) = self.gradient(x, y);
        Vec3::new(hx, hy, -1.0).normalize()
    }
}

/// World-to-camera pose of the given frame.
pub fn pose_at(spec: &SceneSpec, frame: usize) -> (Mat3, Vec3) {
    let (rotation, center) = match spec.trajectory {
        Trajectory::Static => (Mat3::identity(), Vec3::zeros()),
        Trajectory::Linear { translation_per_frame, rotation_per_frame_deg } => {
            let n = frame as f64;
            let angles = rotation_per_frame_deg * n;
            let r = nalgebra::Rotation3::from_euler_angles(
                angles.x.to_radians(),
                angles.y.to_radians(),
                angles.z.to_radians(),
            )
            .into_inner();
            (r, translation_per_frame * n)
        }
        Trajectory::RandomJumps { magnitude } => {
            let mut rng = stream(spec.seed, TAG_JUMPS);
            let mut center = Vec3::zeros();
            for _ in 0..frame {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                center += magnitude * Vec3::new(angle.cos(), angle.sin(), 0.0);
            }
            (Mat3::identity(), center)
        }
        Trajectory::Oscillate { amplitude, rotation_amp_deg, period } => {
            let theta = std::f64::consts::TAU * frame as f64 / period.max(1.0);
            let center = Vec3::new(
                amplitude.x * theta.sin(),
                amplitude.y * (1.0 - theta.cos()),
                amplitude.z * theta.sin() * theta.cos(),
            );
            let angles = Vec3::new(
                rotation_amp_deg.x.to_radians() * theta.sin(),
                rotation_amp_deg.y.to_radians() * (1.0 - theta.cos()) * 0.5,
                rotation_amp_deg.z.to_radians() * theta.sin(),
            );
            let r = nalgebra::Rotation3::from_euler_angles(angles.x, angles.y, angles.z)
                .into_inner();
            (r, center)
        }
    };
    // world-to-camera: x_cam = R (x_world - c)
    (rotation, -(rotation * center))
}

/// Ground-truth slice for one frame: true pose, dense surface samples with
/// normals, and the tracked feature positions.
#[derive(Debug, Clone)]
pub struct TruthFrame {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub surface_points: Vec<Vec3>,
    pub surface_normals: Vec<Vec3>,
    pub features: Vec<Vec3>,
}

impl TruthFrame {
    /// Build a truth frame from an external reference point set (e.g. a
    /// PLY model) instead of a parametric surface.
    pub fn from_points(
        points: Vec<Vec3>,
        normals: Vec<Vec3>,
        rotation: Mat3,
        translation: Vec3,
    ) -> Self {
        Self { rotation, translation, surface_points: points, surface_normals: normals, features: Vec::new() }
    }
}

/// Whole-sequence ground truth.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub frames: Vec<TruthFrame>,
}

/// Output of rendering one frame.
pub struct RenderedFrame {
    pub scan: DepthScan,
    pub prior: PosePrior,
    pub correspondences: Vec<FeatureCorrespondence>,
    pub truth: TruthFrame,
}

fn feature_sites(spec: &SceneSpec) -> Vec<(f64, f64)> {
    let mut rng = stream(spec.seed, TAG_FEATURES);
    let inner = spec.extent * 0.35;
    (0..spec.feature_count)
        .map(|_| (rng.random_range(-inner..inner), rng.random_range(-inner..inner)))
        .collect()
}

/// Render the scene at one frame: rasterize the surface through the true
/// camera, add depth noise, and emit the simulated pose prior, feature
/// correspondences, and the ground-truth slice.
pub fn render_frame(spec: &SceneSpec, frame: usize) -> Result<RenderedFrame> {
    if frame >= spec.frames {
        return Err(Error::Config(format!(
            "frame {frame} out of range for a {}-frame scene",
            spec.frames
        )));
    }
    let surface = Surface::at_frame(spec, frame);
    let (rotation, translation) = pose_at(spec, frame);
    let k = spec.intrinsics;
    let r_inv = rotation.transpose();
    let cam_center = -(r_inv * translation);

    let mut depth = Grid::filled(k.width, k.height, f64::NAN);
    let mut hit_any = false;
    let mut prev_s = spec.standoff;
    for py in 0..k.height {
        for px in 0..k.width {
            let dir = r_inv * Vec3::new((px as f64 - k.cx) / k.fx, (py as f64 - k.cy) / k.fy, 1.0);
            if let Some(s) = intersect_ray(&surface, &cam_center, &dir, prev_s, spec.standoff) {
                let p = cam_center + s * dir;
                if surface.in_domain(p.x, p.y) && s > 0.0 {
                    *depth.get_mut(px, py) = s;
                    prev_s = s;
                    hit_any = true;
                }
            }
        }
    }
    if !hit_any {
        return Err(Error::EmptyScan);
    }
    if spec.depth_noise_sigma > 0.0 {
        let mut rng = stream(spec.seed, TAG_NOISE_BASE + frame as u64);
        let normal = Normal::new(0.0, spec.depth_noise_sigma)
            .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
        for d in depth.data.iter_mut() {
            if !d.is_nan() {
                *d += normal.sample(&mut rng);
            }
        }
    }
    // simple shading so exports look like something
    let mut color = Grid::filled(k.width, k.height, [40u8, 40, 40]);
    for i in 0..depth.data.len() {
        let d = depth.data[i];
        if !d.is_nan() {
            let shade =
                (230.0 - (d - spec.standoff) * 20.0).clamp(30.0, 255.0) as u8;
            color.data[i] = [shade, shade / 2 + 40, 60];
        }
    }
    let scan = DepthScan::from_depth_color(depth, color, k, frame)?;

    // pose prior, optionally perturbed
    let mut prior_rotation = rotation;
    let mut prior_translation = translation;
    if spec.prior_rot_noise_deg > 0.0 || spec.prior_trans_noise > 0.0 {
        let mut rng = stream(spec.seed, TAG_PRIOR_BASE + frame as u64);
        if spec.prior_rot_noise_deg > 0.0 {
            let axis = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if axis.norm() > 1e-9 {
                let angle = rng.random_range(-1.0..1.0) * spec.prior_rot_noise_deg.to_radians();
                prior_rotation =
                    nalgebra::Rotation3::new(axis.normalize() * angle).into_inner() * prior_rotation;
            }
        }
        if spec.prior_trans_noise > 0.0 {
            for i in 0..3 {
                prior_translation[i] += rng.random_range(-1.0..1.0) * spec.prior_trans_noise;
            }
        }
    }
    let prior = PosePrior { rotation: prior_rotation, translation: prior_translation, frame_index: frame };

    // feature correspondences: previous-frame world position paired with
    // the current camera-frame observation
    let prev_surface = Surface::at_frame(spec, frame.saturating_sub(1));
    let mut correspondences = Vec::new();
    for (id, (fx, fy)) in feature_sites(spec).into_iter().enumerate() {
        let (Some(h_prev), Some(h_now)) = (prev_surface.height(fx, fy), surface.height(fx, fy))
        else {
            continue;
        };
        let source = Vec3::new(fx, fy, h_prev);
        let world_now = Vec3::new(fx, fy, h_now);
        let target = rotation * world_now + translation;
        if target.z <= 0.0 {
            continue;
        }
        correspondences.push(FeatureCorrespondence { id: id as u64, source, target });
    }

    // dense truth samples over the surface domain
    let mut surface_points = Vec::new();
    let mut surface_normals = Vec::new();
    let steps = 48;
    let half = spec.extent / 2.0;
    for iy in 0..=steps {
        for ix in 0..=steps {
            let x = -half + spec.extent * ix as f64 / steps as f64;
            let y = -half + spec.extent * iy as f64 / steps as f64;
            if !surface.in_domain(x, y) {
                continue;
            }
            if let Some(h) = surface.height(x, y) {
                surface_points.push(Vec3::new(x, y, h));
                surface_normals.push(surface.normal(x, y));
            }
        }
    }
    let truth = TruthFrame {
        rotation,
        translation,
        surface_points,
        surface_normals,
        features: feature_sites(spec)
            .into_iter()
            .filter_map(|(x, y)| surface.height(x, y).map(|h| Vec3::new(x, y, h)))
            .collect(),
    };

    Ok(RenderedFrame { scan, prior, correspondences, truth })
}

/// Solve `(c + s d).z = h((c + s d).xy)` for the ray parameter `s`
/// (camera-frame depth). Newton iteration seeded from the previous pixel,
/// with a bisection fallback.
fn intersect_ray(surface: &Surface, c: &Vec3, d: &Vec3, init: f64, standoff: f64) -> Option<f64> {
    let f = |s: f64| -> Option<f64> {
        let p = c + s * d;
        surface.height(p.x, p.y).map(|h| p.z - h)
    };
    let mut s = init;
    for _ in 0..30 {
        let p = c + s * d;
        let h = surface.height(p.x, p.y)?;
        let value = p.z - h;
        let (hx, hy) = surface.gradient(p.x, p.y);
        let slope = d.z - hx * d.x - hy * d.y;
        if slope.abs() < 1e-12 {
            break;
        }
        let next = s - value / slope;
        if !next.is_finite() || next <= 0.0 {
            break;
        }
        if (next - s).abs() < 1e-11 {
            return Some(next);
        }
        s = next;
    }
    // bracket and bisect
    let lo_bound = 0.05 * standoff;
    let hi_bound = 5.0 * standoff;
    let samples = 128;
    let mut prev = lo_bound;
    let mut prev_f = f(prev)?;
    for i in 1..=samples {
        let cur = lo_bound + (hi_bound - lo_bound) * i as f64 / samples as f64;
        let Some(cur_f) = f(cur) else {
            prev = cur;
            prev_f = f64::NAN;
            continue;
        };
        if prev_f.is_nan() {
            prev = cur;
            prev_f = cur_f;
            continue;
        }
        if prev_f == 0.0 {
            return Some(prev);
        }
        if prev_f * cur_f < 0.0 {
            let (mut lo, mut hi) = (prev, cur);
            let mut f_lo = prev_f;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let fm = f(mid)?;
                if fm == 0.0 {
                    return Some(mid);
                }
                if f_lo * fm < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    f_lo = fm;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        prev = cur;
        prev_f = cur_f;
    }
    None
}

/// Render the whole sequence into the offline directory layout for replay.
pub fn write_sequence(spec: &SceneSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    crate::posefeed::write_intrinsics(dir, &spec.intrinsics)?;
    for frame in 0..spec.frames {
        let rendered = render_frame(spec, frame)?;
        let envelope = FrameEnvelope {
            scan: rendered.scan,
            prior: Some(rendered.prior),
            correspondences: rendered.correspondences,
        };
        crate::posefeed::write_envelope(dir, &envelope)?;
    }
    Ok(())
}

/// Accuracy of a fused model against one truth frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    /// Mean distance from model points to their nearest truth sample, mm.
    pub mean_nn_distance: f64,
    /// Mean unsigned point-to-plane residual against the truth surface, mm.
    pub mean_plane_residual: f64,
    /// Angle between estimated and true rotation, degrees.
    pub rotation_error_deg: f64,
    /// Distance between estimated and true translation, mm.
    pub translation_error: f64,
}

/// Hash-grid nearest-neighbor index over truth samples.
struct TruthIndex<'a> {
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<u32>>,
    points: &'a [Vec3],
}

impl<'a> TruthIndex<'a> {
    fn build(points: &'a [Vec3], cell: f64) -> Self {
        let mut map: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        Self { cell, map, points }
    }

    fn key(p: &Vec3, cell: f64) -> (i64, i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    }

    fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let center = Self::key(q, self.cell);
        let mut best = (usize::MAX, f64::INFINITY);
        for radius in 0..128i64 {
            if best.0 != usize::MAX && (radius - 1).max(0) as f64 * self.cell > best.1 {
                break;
            }
            for dx in -radius..=radius {
                for dy in -radius..=radius {
                    for dz in -radius..=radius {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != radius {
                            continue;
                        }
                        let key = (center.0 + dx, center.1 + dy, center.2 + dz);
                        if let Some(bucket) = self.map.get(&key) {
                            for &i in bucket {
                                let d = (self.points[i as usize] - q).norm();
                                if d < best.1 {
                                    best = (i as usize, d);
                                }
                            }
                        }
                    }
                }
            }
        }
        if best.0 == usize::MAX {
            // beyond the search horizon; brute force the few stragglers
            for (i, p) in self.points.iter().enumerate() {
                let d = (p - q).norm();
                if d < best.1 {
                    best = (i, d);
                }
            }
        }
        best
    }
}

/// Score model points and an estimated pose against a truth frame.
pub fn evaluate(
    model_positions: &[Vec3],
    estimated_rotation: &Mat3,
    estimated_translation: &Vec3,
    truth: &TruthFrame,
) -> Result<ErrorReport> {
    if model_positions.is_empty() {
        return Err(Error::EmptyModel);
    }
    if truth.surface_points.is_empty() {
        return Err(Error::EmptyInput("truth frame holds no surface samples"));
    }
    let index = TruthIndex::build(&truth.surface_points, 2.0);
    let mut nn_sum = 0.0;
    let mut plane_sum = 0.0;
    for p in model_positions {
        let (i, d) = index.nearest(p);
        nn_sum += d;
        plane_sum += truth.surface_normals[i].dot(&(p - truth.surface_points[i])).abs();
    }
    let n = model_positions.len() as f64;
    let rel = estimated_rotation * truth.rotation.transpose();
    let rotation_error_deg = crate::energy::rotation_vector(&rel).norm().to_degrees();
    Ok(ErrorReport {
        mean_nn_distance: nn_sum / n,
        mean_plane_residual: plane_sum / n,
        rotation_error_deg,
        translation_error: (estimated_translation - truth.translation).norm(),
    })
}

// ---- scene config files ------------------------------------------------

impl SceneSpec {
    /// Read a scene from a key=value file. Missing keys fall back to the
    /// defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let map = kv::parse_file(path)?;
        Self::from_kv(&map, path)
    }

    pub fn from_kv(map: &kv::KvMap, origin: &Path) -> Result<Self> {
        let d = SceneSpec::default();
        let kind = match map.get("kind").map(String::as_str) {
            None => d.kind,
            Some("plane") => SurfaceKind::Plane,
            Some("sheet") => SurfaceKind::SinusoidalSheet,
            Some("hemisphere") => SurfaceKind::Hemisphere,
            Some(other) => {
                return Err(Error::parse(
                    origin.display().to_string(),
                    format!("unknown surface kind {other:?}"),
                ))
            }
        };
        let trajectory = match map.get("trajectory").map(String::as_str) {
            None | Some("static") => Trajectory::Static,
            Some("linear") => Trajectory::Linear {
                translation_per_frame: Vec3::new(
                    kv::get_f64_or(map, "traj_tx", 0.0, origin)?,
                    kv::get_f64_or(map, "traj_ty", 0.0, origin)?,
                    kv::get_f64_or(map, "traj_tz", 0.0, origin)?,
                ),
                rotation_per_frame_deg: Vec3::new(
                    kv::get_f64_or(map, "traj_rx", 0.0, origin)?,
                    kv::get_f64_or(map, "traj_ry", 0.0, origin)?,
                    kv::get_f64_or(map, "traj_rz", 0.0, origin)?,
                ),
            },
            Some("jumps") => Trajectory::RandomJumps {
                magnitude: kv::get_f64_or(map, "jump_magnitude", 5.0, origin)?,
            },
            Some("oscillate") => Trajectory::Oscillate {
                amplitude: Vec3::new(
                    kv::get_f64_or(map, "osc_ax", 0.0, origin)?,
                    kv::get_f64_or(map, "osc_ay", 0.0, origin)?,
                    kv::get_f64_or(map, "osc_az", 0.0, origin)?,
                ),
                rotation_amp_deg: Vec3::new(
                    kv::get_f64_or(map, "osc_rx", 0.0, origin)?,
                    kv::get_f64_or(map, "osc_ry", 0.0, origin)?,
                    kv::get_f64_or(map, "osc_rz", 0.0, origin)?,
                ),
                period: kv::get_f64_or(map, "osc_period", 50.0, origin)?,
            },
            Some(other) => {
                return Err(Error::parse(
                    origin.display().to_string(),
                    format!("unknown trajectory {other:?}"),
                ))
            }
        };
        let intrinsics = CameraIntrinsics::new(
            kv::get_f64_or(map, "fx", d.intrinsics.fx, origin)?,
            kv::get_f64_or(map, "fy", d.intrinsics.fy, origin)?,
            kv::get_f64_or(map, "cx", d.intrinsics.cx, origin)?,
            kv::get_f64_or(map, "cy", d.intrinsics.cy, origin)?,
            kv::get_usize_or(map, "width", d.intrinsics.width, origin)?,
            kv::get_usize_or(map, "height", d.intrinsics.height, origin)?,
        )?;
        let spec = Self {
            kind,
            extent: kv::get_f64_or(map, "extent", d.extent, origin)?,
            standoff: kv::get_f64_or(map, "standoff", d.standoff, origin)?,
            amplitude: kv::get_f64_or(map, "amplitude", d.amplitude, origin)?,
            temporal_freq: kv::get_f64_or(map, "temporal_freq", d.temporal_freq, origin)?,
            spatial_wavelength: kv::get_f64_or(
                map,
                "spatial_wavelength",
                d.spatial_wavelength,
                origin,
            )?,
            bump_min: kv::get_f64_or(map, "bump_min", d.bump_min, origin)?,
            bump_max: kv::get_f64_or(map, "bump_max", d.bump_max, origin)?,
            bump_sigma: kv::get_f64_or(map, "bump_sigma", d.bump_sigma, origin)?,
            trajectory,
            depth_noise_sigma: kv::get_f64_or(map, "depth_noise", d.depth_noise_sigma, origin)?,
            frames: kv::get_usize_or(map, "frames", d.frames, origin)?,
            seed: kv::get_usize_or(map, "seed", d.seed as usize, origin)? as u64,
            intrinsics,
            feature_count: kv::get_usize_or(map, "features", d.feature_count, origin)?,
            prior_rot_noise_deg: kv::get_f64_or(
                map,
                "prior_rot_noise_deg",
                d.prior_rot_noise_deg,
                origin,
            )?,
            prior_trans_noise: kv::get_f64_or(
                map,
                "prior_trans_noise",
                d.prior_trans_noise,
                origin,
            )?,
        };
        if spec.frames < 1 {
            return Err(Error::Config("scene needs at least one frame".into()));
        }
        if spec.amplitude < 0.0 {
            return Err(Error::Config("amplitude must be non-negative".into()));
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_spec() -> SceneSpec {
        SceneSpec {
            kind: SurfaceKind::Plane,
            extent: 80.0,
            amplitude: 0.0,
            frames: 3,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn plane_renders_constant_depth() {
        let spec = plane_spec();
        let rendered = render_frame(&spec, 0).unwrap();
        for &d in &rendered.scan.depth.data {
            assert!(!d.is_nan());
            assert!((d - 50.0).abs() < 1e-9, "depth {d}");
        }
    }

    #[test]
    fn static_scene_renders_identically_across_frames_and_calls() {
        let spec = SceneSpec { temporal_freq: 0.0, amplitude: 0.0, ..plane_spec() };
        let a = render_frame(&spec, 0).unwrap();
        let b = render_frame(&spec, 1).unwrap();
        let again = render_frame(&spec, 0).unwrap();
        let bits = |scan: &DepthScan| -> Vec<u64> {
            scan.depth.data.iter().map(|d| d.to_bits()).collect()
        };
        assert_eq!(bits(&a.scan), bits(&b.scan));
        assert_eq!(bits(&a.scan), bits(&again.scan));
    }

    #[test]
    fn noisy_render_is_deterministic_per_frame() {
        let spec = SceneSpec { depth_noise_sigma: 0.1, ..plane_spec() };
        let a = render_frame(&spec, 1).unwrap();
        let b = render_frame(&spec, 1).unwrap();
        let bits = |scan: &DepthScan| -> Vec<u64> {
            scan.depth.data.iter().map(|d| d.to_bits()).collect()
        };
        assert_eq!(bits(&a.scan), bits(&b.scan));
        // different frames draw different noise
        let c = render_frame(&spec, 2).unwrap();
        assert_ne!(bits(&a.scan), bits(&c.scan));
    }

    #[test]
    fn sheet_depth_matches_analytic_surface() {
        let spec = SceneSpec {
            amplitude: 2.5,
            trajectory: Trajectory::Linear {
                translation_per_frame: Vec3::new(0.5, 0.2, 0.1),
                rotation_per_frame_deg: Vec3::new(0.2, 0.3, 0.1),
            },
            frames: 10,
            ..SceneSpec::default()
        };
        let frame = 6;
        let rendered = render_frame(&spec, frame).unwrap();
        let surface = Surface::at_frame(&spec, frame);
        let (r, t) = pose_at(&spec, frame);
        let r_inv = r.transpose();
        let k = spec.intrinsics;
        let mut checked = 0;
        for py in (0..k.height).step_by(7) {
            for px in (0..k.width).step_by(7) {
                let d = *rendered.scan.depth.get(px, py);
                if d.is_nan() {
                    continue;
                }
                let cam = crate::geometry::back_project(px as f64, py as f64, d, &k).unwrap();
                let world = r_inv * (cam - t);
                let h = surface.height(world.x, world.y).unwrap();
                assert!(
                    (world.z - h).abs() < 0.05,
                    "pixel ({px},{py}): z {} vs surface {h}",
                    world.z
                );
                checked += 1;
            }
        }
        assert!(checked > 300);
    }

    #[test]
    fn hemisphere_has_invalid_background() {
        let spec = SceneSpec { kind: SurfaceKind::Hemisphere, frames: 2, ..SceneSpec::default() };
        let rendered = render_frame(&spec, 0).unwrap();
        // center hits the cap at the standoff
        let c = *rendered.scan.depth.get(160, 120);
        assert!((c - 50.0).abs() < 1e-6, "cap depth {c}");
        // far corner misses the dome
        assert!(rendered.scan.depth.get(2, 2).is_nan());
    }

    #[test]
    fn bumps_accumulate_across_frames() {
        let spec = SceneSpec {
            bump_min: 2.0,
            bump_max: 3.0,
            temporal_freq: 0.0,
            frames: 5,
            ..SceneSpec::default()
        };
        let s0 = Surface::at_frame(&spec, 0);
        let s2 = Surface::at_frame(&spec, 2);
        let s3 = Surface::at_frame(&spec, 3);
        assert_eq!(s0.bumps.len(), 0);
        assert_eq!(s2.bumps.len(), 2);
        assert_eq!(s3.bumps.len(), 3);
        // earlier bumps are a prefix of later ones
        for (a, b) in s2.bumps.iter().zip(&s3.bumps) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.amplitude, b.amplitude);
        }
        for b in &s3.bumps {
            assert!(b.amplitude.abs() >= 2.0 && b.amplitude.abs() <= 3.0);
        }
    }

    #[test]
    fn correspondences_track_the_surface() {
        let spec = SceneSpec { frames: 4, ..SceneSpec::default() };
        let frame = 2;
        let rendered = render_frame(&spec, frame).unwrap();
        assert!(!rendered.correspondences.is_empty());
        let prev = Surface::at_frame(&spec, frame - 1);
        let now = Surface::at_frame(&spec, frame);
        let (r, t) = pose_at(&spec, frame);
        for c in &rendered.correspondences {
            let h_prev = prev.height(c.source.x, c.source.y).unwrap();
            assert!((c.source.z - h_prev).abs() < 1e-12);
            let world_now = Vec3::new(c.source.x, c.source.y, now.height(c.source.x, c.source.y).unwrap());
            assert!((c.target - (r * world_now + t)).norm() < 1e-12);
        }
    }

    #[test]
    fn evaluate_zero_for_truth_copy_and_offset_scales() {
        let spec = SceneSpec::default();
        let rendered = render_frame(&spec, 0).unwrap();
        let truth = &rendered.truth;
        let report = evaluate(
            &truth.surface_points,
            &truth.rotation,
            &truth.translation.clone(),
            truth,
        )
        .unwrap();
        assert!(report.mean_nn_distance < 1e-12);
        assert!(report.mean_plane_residual < 1e-12);
        assert!(report.rotation_error_deg < 1e-12);
        assert!(report.translation_error < 1e-12);

        let offset: Vec<Vec3> = truth
            .surface_points
            .iter()
            .map(|p| p + Vec3::new(0.1, 0.0, 0.0))
            .collect();
        let report =
            evaluate(&offset, &truth.rotation, &truth.translation.clone(), truth).unwrap();
        assert!(
            (report.mean_nn_distance - 0.1).abs() < 0.005,
            "mean nn {}",
            report.mean_nn_distance
        );
    }

    #[test]
    fn evaluate_rejects_empty_model() {
        let spec = SceneSpec::default();
        let rendered = render_frame(&spec, 0).unwrap();
        assert!(matches!(
            evaluate(&[], &Mat3::identity(), &Vec3::zeros(), &rendered.truth),
            Err(Error::EmptyModel)
        ));
    }

    #[test]
    fn out_of_range_frame_is_rejected() {
        let spec = SceneSpec { frames: 2, ..SceneSpec::default() };
        assert!(render_frame(&spec, 2).is_err());
    }

    #[test]
    fn scene_spec_from_kv_roundtrip() {
        let text = "kind=sheet\nextent=30\namplitude=1.5\ntrajectory=jumps\njump_magnitude=4\nframes=7\nseed=9\nfeatures=0\n";
        let map = kv::parse_str(text, "test").unwrap();
        let spec = SceneSpec::from_kv(&map, Path::new("test")).unwrap();
        assert_eq!(spec.kind, SurfaceKind::SinusoidalSheet);
        assert_eq!(spec.extent, 30.0);
        assert_eq!(spec.frames, 7);
        assert_eq!(spec.seed, 9);
        assert_eq!(spec.feature_count, 0);
        assert_eq!(spec.trajectory, Trajectory::RandomJumps { magnitude: 4.0 });
    }
}

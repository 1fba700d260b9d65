//! Ingestion of external global-pose estimates and sparse feature
//! correspondences, plus the latest-wins scheduling contract between the
//! feed and the dense pipeline.
//!
//! The producer may outrun the consumer; the feed keeps only the newest
//! pending frame and counts everything it displaced as dropped.

use std::path::Path;
use std::sync::Mutex;

use crate::geometry::DepthScan;
use crate::io::kv;
use crate::warpfield::WarpField;
use crate::{Error, Mat3, Result, Vec3};

/// Externally supplied global pose estimate for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePrior {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub frame_index: usize,
}

/// One tracked sparse feature: its model-side position from the previous
/// frame and its camera-frame observation in the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCorrespondence {
    pub id: u64,
    /// Previous-frame position in the model frame.
    pub source: Vec3,
    /// Current observation in the camera frame.
    pub target: Vec3,
}

/// Everything one frame delivers to the dense pipeline.
#[derive(Debug, Clone)]
pub struct FrameEnvelope {
    pub scan: DepthScan,
    pub prior: Option<PosePrior>,
    pub correspondences: Vec<FeatureCorrespondence>,
}

impl FrameEnvelope {
    pub fn frame_index(&self) -> usize {
        self.scan.frame_index
    }
}

/// Feed accounting. Every submission is eventually dropped, delivered, or
/// still pending, so `drops + deliveries + pending == submissions`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FeedStats {
    pub submissions: u64,
    pub drops: u64,
    pub deliveries: u64,
    pub pending: u64,
}

#[derive(Default)]
struct FeedInner {
    pending: Option<FrameEnvelope>,
    last_submitted: Option<usize>,
    stats: FeedStats,
}

/// Latest-wins frame feed, safe for one producer and one consumer on
/// different threads.
///
/// Only the newest unprocessed envelope is buffered; submitting over a
/// pending envelope supersedes it.
#[derive(Default)]
pub struct FrameFeed {
    inner: Mutex<FeedInner>,
}

impl FrameFeed {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store an envelope, superseding any pending one. Frame indices must
    /// be strictly increasing.
    pub fn submit(&self, envelope: FrameEnvelope) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(last) = inner.last_submitted {
            if envelope.frame_index() <= last {
                return Err(Error::OutOfOrder { frame: envelope.frame_index(), last });
            }
        }
        inner.last_submitted = Some(envelope.frame_index());
        inner.stats.submissions += 1;
        if inner.pending.replace(envelope).is_some() {
            inner.stats.drops += 1;
        } else {
            inner.stats.pending = 1;
        }
        Ok(())
    }

    /// Remove and return the newest pending envelope, if any.
    pub fn take_latest(&self) -> Option<FrameEnvelope> {
        let mut inner = self.inner.lock().unwrap();
        let envelope = inner.pending.take();
        if envelope.is_some() {
            inner.stats.deliveries += 1;
            inner.stats.pending = 0;
        }
        envelope
    }

    pub fn stats(&self) -> FeedStats {
        self.inner.lock().unwrap().stats
    }
}

/// Initialize the global pose from a prior, leaving node transforms
/// untouched. Returns whether a prior was applied; without one the field
/// is returned unchanged (degraded mode).
pub fn apply_prior(field: &WarpField, prior: Option<&PosePrior>) -> (WarpField, bool) {
    let mut out = field.clone();
    match prior {
        Some(p) => {
            out.rotation = p.rotation;
            out.translation = p.translation;
            (out, true)
        }
        None => (out, false),
    }
}

// ---- offline directory layout ----------------------------------------
//
//   intrinsics.txt                  fx/fy/cx/cy/width/height key=value
//   frame_NNNN.depth.f32 (+.hdr)    or frame_NNNN.depth.pgm
//   frame_NNNN.color.ppm
//   frame_NNNN.pose.txt             9 rotation values row-major + 3 translation
//   frame_NNNN.corr.txt             id ox oy oz nx ny nz, one per line

fn frame_stem(dir: &Path, frame: usize, suffix: &str) -> std::path::PathBuf {
    dir.join(format!("frame_{frame:04}.{suffix}"))
}

pub fn write_intrinsics(dir: &Path, k: &crate::CameraIntrinsics) -> Result<()> {
    let text = format!(
        "fx={}\nfy={}\ncx={}\ncy={}\nwidth={}\nheight={}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    let path = dir.join("intrinsics.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_intrinsics(dir: &Path) -> Result<crate::CameraIntrinsics> {
    let path = dir.join("intrinsics.txt");
    let map = kv::parse_file(&path)?;
    crate::CameraIntrinsics::new(
        kv::get_f64(&map, "fx", &path)?,
        kv::get_f64(&map, "fy", &path)?,
        kv::get_f64(&map, "cx", &path)?,
        kv::get_f64(&map, "cy", &path)?,
        kv::get_usize(&map, "width", &path)?,
        kv::get_usize(&map, "height", &path)?,
    )
}

/// Write one envelope into the offline layout.
pub fn write_envelope(dir: &Path, envelope: &FrameEnvelope) -> Result<()> {
    let frame = envelope.frame_index();
    crate::io::write_f32_raster(&frame_stem(dir, frame, "depth.f32"), &envelope.scan.depth)?;
    crate::io::write_ppm(&frame_stem(dir, frame, "color.ppm"), &envelope.scan.color)?;
    if let Some(prior) = &envelope.prior {
        let mut text = String::new();
        for r in 0..3 {
            for c in 0..3 {
                text.push_str(&format!("{} ", prior.rotation[(r, c)]));
            }
        }
        text.push('\n');
        text.push_str(&format!(
            "{} {} {}\n",
            prior.translation.x, prior.translation.y, prior.translation.z
        ));
        let path = frame_stem(dir, frame, "pose.txt");
        std::fs::write(&path, text)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    let mut corr = String::new();
    for c in &envelope.correspondences {
        corr.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            c.id, c.source.x, c.source.y, c.source.z, c.target.x, c.target.y, c.target.z
        ));
    }
    let path = frame_stem(dir, frame, "corr.txt");
    std::fs::write(&path, corr).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_pose_file(path: &Path, frame_index: usize) -> Result<PosePrior> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path.display().to_string(), "bad number in pose file"))?;
    if vals.len() != 12 {
        return Err(Error::parse(path.display().to_string(), "pose file needs 12 values"));
    }
    let rotation = Mat3::from_row_slice(&vals[..9]);
    let translation = Vec3::new(vals[9], vals[10], vals[11]);
    Ok(PosePrior { rotation, translation, frame_index })
}

fn read_corr_file(path: &Path) -> Result<Vec<FeatureCorrespondence>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 7 {
            return Err(Error::parse(
                path.display().to_string(),
                format!("line {}: expected 7 fields", lineno + 1),
            ));
        }
        let id = toks[0].parse().map_err(|_| {
            Error::parse(path.display().to_string(), format!("line {}: bad id", lineno + 1))
        })?;
        let mut vals = [0.0f64; 6];
        for (i, t) in toks[1..].iter().enumerate() {
            vals[i] = t.parse().map_err(|_| {
                Error::parse(path.display().to_string(), format!("line {}: bad float", lineno + 1))
            })?;
        }
        out.push(FeatureCorrespondence {
            id,
            source: Vec3::new(vals[0], vals[1], vals[2]),
            target: Vec3::new(vals[3], vals[4], vals[5]),
        });
    }
    Ok(out)
}

/// Read all envelopes from an offline directory, sorted by frame index.
/// Frames without a pose file come back with no prior (degraded mode).
pub fn read_offline_dir(dir: &Path) -> Result<Vec<FrameEnvelope>> {
    let intrinsics = read_intrinsics(dir)?;
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let stripped = name.strip_prefix("frame_");
        if let Some(rest) = stripped {
            let (f32_depth, idx) = if let Some(idx) = rest.strip_suffix(".depth.f32") {
                (true, idx)
            } else if let Some(idx) = rest.strip_suffix(".depth.pgm") {
                (false, idx)
            } else {
                continue;
            };
            if let Ok(frame) = idx.parse::<usize>() {
                frames.push((frame, f32_depth));
            }
        }
    }
    frames.sort_unstable();
    if frames.is_empty() {
        return Err(Error::EmptyInput("offline directory holds no frames"));
    }
    let mut envelopes = Vec::with_capacity(frames.len());
    for (frame, f32_depth) in frames {
        let depth = if f32_depth {
            crate::io::read_f32_raster(&frame_stem(dir, frame, "depth.f32"))?
        } else {
            crate::io::read_pgm16(&frame_stem(dir, frame, "depth.pgm"))?
        };
        let color_path = frame_stem(dir, frame, "color.ppm");
        let color = if color_path.exists() {
            crate::io::read_ppm(&color_path)?
        } else {
            crate::geometry::Grid::filled(depth.width, depth.height, [128u8; 3])
        };
        let scan = DepthScan::from_depth_color(depth, color, intrinsics, frame)?;
        let pose_path = frame_stem(dir, frame, "pose.txt");
        let prior =
            if pose_path.exists() { Some(read_pose_file(&pose_path, frame)?) } else { None };
        let corr_path = frame_stem(dir, frame, "corr.txt");
        let correspondences =
            if corr_path.exists() { read_corr_file(&corr_path)? } else { Vec::new() };
        envelopes.push(FrameEnvelope { scan, prior, correspondences });
    }
    Ok(envelopes)
}

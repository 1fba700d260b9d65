//! warpfuse — incremental reconstruction of a deforming surface from a
//! sequence of depth+color scans.
//!
//! A weighted point model is warped by an embedded-deformation node graph
//! plus a global rigid pose, aligned to each new scan by minimizing a
//! six-term least-squares energy with Levenberg-Marquardt, and then fused
//! with the scan under truncated-distance weighting and stability
//! filtering.
//!
//! The crate is organized along the pipeline stages:
//!
//! - [`geometry`]: pinhole camera, projection/back-projection, normal maps
//! - [`warpfield`]: embedded-deformation node graph, skinning, warping
//! - [`energy`]: residual blocks and analytic Jacobians of the energy terms
//! - [`solver`]: Levenberg-Marquardt over global pose and node transforms
//! - [`fusion`]: projective registration, weighted fusion, point filtering
//! - [`posefeed`]: external pose/feature ingestion and latest-wins scheduling
//! - [`synth`]: synthetic deforming scenes with analytic ground truth
//! - [`pipeline`]: the frame loop, metrics stream, and model exports

pub mod energy;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod posefeed;
pub mod solver;
mod sparse;
pub mod synth;
pub mod warpfield;

/// Scalar 3-vector used throughout (millimeters for positions).
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 matrix (rotations, node affines).
pub type Mat3 = nalgebra::Matrix3<f64>;

pub use energy::EnergyParams;
pub use fusion::{FusionParams, ModelPoint, RegistrationMap};
pub use geometry::{CameraIntrinsics, DepthScan};
pub use posefeed::{FeatureCorrespondence, FrameEnvelope, FrameFeed, PosePrior};
pub use solver::{SolveReport, SolverConfig};
pub use synth::SceneSpec;
pub use warpfield::{EdNode, Skinning, WarpField};

/// Errors surfaced by the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid depth value {depth}")]
    InvalidDepth { depth: f64 },
    #[error("pixel ({u}, {v}) outside {width}x{height} raster")]
    PixelOutOfFrame { u: f64, v: f64, width: usize, height: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate warp produced a zero normal")]
    DegenerateWarp,
    #[error("frame {frame} arrived out of order (last submitted {last})")]
    OutOfOrder { frame: usize, last: usize },
    #[error("optimization problem has no residuals")]
    EmptyProblem,
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("camera does not face the surface: rendered scan is empty")]
    EmptyScan,
    #[error("cannot evaluate an empty model")]
    EmptyModel,
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

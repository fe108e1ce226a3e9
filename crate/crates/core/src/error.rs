use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} rad is within 1e-6 of pi; log is ill-conditioned")]
    AngleNearPi { angle: f64 },
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("depth must be positive, got {depth}")]
    NonPositiveDepth { depth: f64 },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("entry {line}: timestamp does not increase")]
    NonMonotonicTimestamp { line: usize },
    #[error("overlap ({overlap}) must be smaller than window ({window})")]
    InvalidWindow { window: i64, overlap: i64 },
    #[error("IMU samples do not cover [{t0}, {t1}] ns")]
    ImuGap { t0: i64, t1: i64 },
    #[error("packet has zero duration (t0 = t1 = {t})")]
    DegeneratePacket { t: i64 },

    #[error("image dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("keypoint {index} is too close to the image border to describe")]
    BorderKeypoint { index: usize },

    #[error("no valid depth pixels inside the ROI")]
    EmptyRoi,
    #[error("scale is unobservable: sum of weighted squared inverse depths is {denominator}")]
    DegenerateScale { denominator: f64 },

    #[error("camera baseline {baseline} m is too small to triangulate")]
    DegenerateBaseline { baseline: f64 },
    #[error("rays are parallel within {angle_deg} deg")]
    ParallelRays { angle_deg: f64 },
    #[error("best model has {found} inliers, {required} required")]
    InsufficientInliers { found: usize, required: usize },
    #[error("normal equations are singular even with damping")]
    SingularNormalEquations,

    #[error("estimated and reference trajectories do not overlap in time")]
    NoOverlap,
    #[error("point set is degenerate for this alignment: {0}")]
    DegenerateGeometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Attaches a file path to an error that does not already carry one.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            e @ (Error::Io { .. } | Error::InFile { .. }) => e,
            e => Error::InFile { path: path.into(), source: Box::new(e) },
        }
    }

    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse { line, reason: reason.into() }
    }
}

use std::path::PathBuf;

use crate::geometry::CameraId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("incident angle {theta} rad outside [0, {theta_max}]")]
    AngleOutOfDomain { theta: f64, theta_max: f64 },

    #[error("image radius {radius} px exceeds the lens limit {max_radius} px")]
    RadiusOutOfRange { radius: f64, max_radius: f64 },

    #[error("point lies outside the field of view (theta = {theta} rad, limit {theta_max} rad)")]
    OutOfFov { theta: f64, theta_max: f64 },

    #[error("cannot project the camera-frame origin")]
    DegeneratePoint,

    #[error("Newton iteration did not converge for r = {radius} px after {iterations} iterations")]
    NoConvergence { radius: f64, iterations: usize },

    #[error("ray does not intersect the ground plane (direction z = {dz})")]
    NoGroundIntersection { dz: f64 },

    #[error("invalid quaternion: {0}")]
    InvalidQuaternion(String),

    #[error("invalid rig: {0}")]
    InvalidRig(String),

    #[error("invalid keypoint: {0}")]
    InvalidKeypoint(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { got: usize, expected: usize },

    #[error("bad initialization: only {feasible} of {total} keypoints reach the ground under the initial rig")]
    BadInitialization { feasible: usize, total: usize },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("could not place {requested} keypoints in zone {cam_i}-{cam_j} ({found} found)")]
    ZoneGeometry {
        cam_i: CameraId,
        cam_j: CameraId,
        requested: usize,
        found: usize,
    },

    #[error("missing image for camera {0}")]
    MissingImage(CameraId),

    #[error("raster shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{path}: schema violation at `{json_path}`: {message}")]
    Schema {
        path: PathBuf,
        json_path: String,
        message: String,
    },

    #[error("{path}: unsupported version {version}")]
    Version { path: PathBuf, version: u32 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

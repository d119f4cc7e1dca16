//! Vehicle/camera transforms and ground-plane reprojection.
//!
//! Vehicle frame: `X` forward, `Y` left, `Z` up, origin on the ground.
//! Extrinsics map vehicle coordinates into the camera frame,
//! `P_c = R * P_v + t`, so the camera centre in the vehicle frame is `-R^T t`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{self, FisheyeIntrinsics, PixelPoint};
use crate::error::{Error, Result};

/// Rays whose vehicle-frame direction has `z >= -DESCENT_EPSILON` are treated
/// as never reaching the ground.
pub const DESCENT_EPSILON: f64 = 1e-6;

const MIN_QUATERNION_NORM: f64 = 1e-8;

/// Unit quaternion `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes the input; rejects near-zero or non-finite quaternions.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm < MIN_QUATERNION_NORM {
            return Err(Error::InvalidQuaternion(format!(
                "[{w}, {x}, {y}, {z}] has norm {norm}"
            )));
        }
        Ok(Quaternion {
            w: w / norm,
            x: x / norm,
            y: y / norm,
            z: z / norm,
        })
    }

    pub fn from_array(q: [f64; 4]) -> Result<Self> {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Quaternion of an (orthonormal) rotation matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
        let q = uq.quaternion();
        Quaternion::new(q.w, q.i, q.j, q.k).expect("unit quaternion from rotation")
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self)
    }
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: &Quaternion) -> Matrix3<f64> {
    let Quaternion { w, x, y, z } = *q;
    Matrix3::new(
        1.0 - 2.0 * y * y - 2.0 * z * z,
        2.0 * x * y - 2.0 * w * z,
        2.0 * x * z + 2.0 * w * y,
        2.0 * x * y + 2.0 * w * z,
        1.0 - 2.0 * x * x - 2.0 * z * z,
        2.0 * y * z - 2.0 * w * x,
        2.0 * x * z - 2.0 * w * y,
        2.0 * y * z + 2.0 * w * x,
        1.0 - 2.0 * x * x - 2.0 * y * y,
    )
}

/// Vehicle-to-camera rigid transform `P_c = R P_v + t`. Stored as the
/// rotation and the camera centre `-R^T t`, so a centre set from fixed
/// heights survives bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub q: Quaternion,
    pub center: Vector3<f64>,
}

impl Extrinsics {
    pub const IDENTITY: Extrinsics = Extrinsics {
        q: Quaternion::IDENTITY,
        center: Vector3::new(0.0, 0.0, 0.0),
    };

    /// Builds extrinsics from the rotation and the translation `t`.
    pub fn new(q: Quaternion, t: Vector3<f64>) -> Self {
        Extrinsics {
            q,
            center: -(q.matrix().transpose() * t),
        }
    }

    /// Builds extrinsics from the camera centre expressed in the vehicle frame.
    pub fn from_center(q: Quaternion, center: Vector3<f64>) -> Self {
        Extrinsics { q, center }
    }

    /// Builds extrinsics from the camera-to-vehicle rotation and camera centre.
    pub fn from_pose(camera_to_vehicle: &Matrix3<f64>, center: Vector3<f64>) -> Self {
        let r = camera_to_vehicle.transpose();
        Self::from_center(Quaternion::from_matrix(&r), center)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.q.matrix()
    }

    pub fn translation(&self) -> Vector3<f64> {
        -(self.rotation() * self.center)
    }

    /// Camera centre in the vehicle frame.
    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    /// Orientation of the camera axes expressed in the vehicle frame (`R^T`).
    pub fn camera_to_vehicle_rotation(&self) -> Matrix3<f64> {
        self.rotation().transpose()
    }
}

pub fn vehicle_to_camera(p: &Vector3<f64>, e: &Extrinsics) -> Vector3<f64> {
    e.rotation() * (p - e.center)
}

pub fn camera_to_vehicle(p: &Vector3<f64>, e: &Extrinsics) -> Vector3<f64> {
    e.rotation().transpose() * p + e.center
}

/// A point on the ground plane `z = 0` of the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct GroundPoint {
    pub x: f64,
    pub y: f64,
}

impl GroundPoint {
    pub fn new(x: f64, y: f64) -> Self {
        GroundPoint { x, y }
    }

    pub fn distance(&self, other: &GroundPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 0.0)
    }
}

impl From<[f64; 2]> for GroundPoint {
    fn from([x, y]: [f64; 2]) -> Self {
        GroundPoint { x, y }
    }
}

impl From<GroundPoint> for [f64; 2] {
    fn from(g: GroundPoint) -> Self {
        [g.x, g.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundIntersection {
    pub point: GroundPoint,
    /// Distance from the camera centre along the unit ray.
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraId {
    Front,
    Left,
    Rear,
    Right,
}

impl CameraId {
    pub const ALL: [CameraId; 4] = [
        CameraId::Front,
        CameraId::Left,
        CameraId::Rear,
        CameraId::Right,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CameraId::Front => "front",
            CameraId::Left => "left",
            CameraId::Rear => "rear",
            CameraId::Right => "right",
        }
    }
}

impl fmt::Display for CameraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CameraId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(CameraId::Front),
            "left" => Ok(CameraId::Left),
            "rear" => Ok(CameraId::Rear),
            "right" => Ok(CameraId::Right),
            other => Err(Error::InvalidRig(format!("unknown camera id `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: CameraId,
    pub intrinsics: FisheyeIntrinsics,
    pub extrinsics: Extrinsics,
}

impl Camera {
    pub fn new(id: CameraId, intrinsics: FisheyeIntrinsics, extrinsics: Extrinsics) -> Self {
        Camera {
            id,
            intrinsics,
            extrinsics,
        }
    }

    /// Camera-centre height above the ground.
    pub fn height(&self) -> f64 {
        self.extrinsics.center().z
    }
}

/// Overlapping camera pairs of a conventional surround-view rig.
pub fn default_adjacency() -> Vec<(CameraId, CameraId)> {
    vec![
        (CameraId::Front, CameraId::Left),
        (CameraId::Front, CameraId::Right),
        (CameraId::Rear, CameraId::Left),
        (CameraId::Rear, CameraId::Right),
    ]
}

/// Four cameras plus the list of pairs whose views overlap on the ground.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
    adjacency: Vec<(CameraId, CameraId)>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, adjacency: Vec<(CameraId, CameraId)>) -> Result<Self> {
        if cameras.len() != 4 {
            return Err(Error::InvalidRig(format!(
                "expected 4 cameras, got {}",
                cameras.len()
            )));
        }
        for (k, cam) in cameras.iter().enumerate() {
            if cameras[..k].iter().any(|c| c.id == cam.id) {
                return Err(Error::InvalidRig(format!("duplicate camera id `{}`", cam.id)));
            }
        }
        for (k, &(a, b)) in adjacency.iter().enumerate() {
            if a == b {
                return Err(Error::InvalidRig(format!("self-pair `{a}`-`{b}` in adjacency")));
            }
            if !cameras.iter().any(|c| c.id == a) || !cameras.iter().any(|c| c.id == b) {
                return Err(Error::InvalidRig(format!(
                    "adjacency pair `{a}`-`{b}` references a missing camera"
                )));
            }
            if adjacency[..k]
                .iter()
                .any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
            {
                return Err(Error::InvalidRig(format!("duplicate adjacency pair `{a}`-`{b}`")));
            }
        }
        Ok(CameraRig { cameras, adjacency })
    }

    pub fn with_default_adjacency(cameras: Vec<Camera>) -> Result<Self> {
        Self::new(cameras, default_adjacency())
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn adjacency(&self) -> &[(CameraId, CameraId)] {
        &self.adjacency
    }

    pub fn ids(&self) -> impl Iterator<Item = CameraId> + '_ {
        self.cameras.iter().map(|c| c.id)
    }

    pub fn index_of(&self, id: CameraId) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    pub fn camera(&self, id: CameraId) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn camera_mut(&mut self, id: CameraId) -> Option<&mut Camera> {
        self.cameras.iter_mut().find(|c| c.id == id)
    }

    /// Whether `a` and `b` form an adjacency pair, in either order.
    pub fn are_adjacent(&self, a: CameraId, b: CameraId) -> bool {
        self.adjacency
            .iter()
            .any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
    }

    /// Same rig with every camera's extrinsics replaced.
    pub fn with_extrinsics(&self, extrinsics: &[Extrinsics]) -> Self {
        assert_eq!(extrinsics.len(), self.cameras.len());
        let mut rig = self.clone();
        for (cam, e) in rig.cameras.iter_mut().zip(extrinsics) {
            cam.extrinsics = *e;
        }
        rig
    }
}

/// Ground reprojection of a pixel: intersect its viewing ray with `z = 0`.
pub fn pixel_to_ground(p: PixelPoint, cam: &Camera) -> Result<GroundIntersection> {
    let ray = camera::pixel_to_ray(p, &cam.intrinsics)?;
    let rt = cam.extrinsics.camera_to_vehicle_rotation();
    let origin = cam.extrinsics.center;
    let dir = rt * ray.to_vector();
    if dir.z >= -DESCENT_EPSILON {
        return Err(Error::NoGroundIntersection { dz: dir.z });
    }
    let lambda = -origin.z / dir.z;
    if !(lambda > 0.0) {
        return Err(Error::NoGroundIntersection { dz: dir.z });
    }
    Ok(GroundIntersection {
        point: GroundPoint::new(origin.x + lambda * dir.x, origin.y + lambda * dir.y),
        lambda,
    })
}

pub fn ground_to_pixel(g: GroundPoint, cam: &Camera) -> Result<PixelPoint> {
    point_to_pixel(&g.to_vector(), cam)
}

/// Projects an arbitrary vehicle-frame point into the camera image.
pub fn point_to_pixel(p: &Vector3<f64>, cam: &Camera) -> Result<PixelPoint> {
    let pc = vehicle_to_camera(p, &cam.extrinsics);
    camera::ray_to_pixel(&pc, &cam.intrinsics)
}

//! Synthetic rigs, keypoints and ground-roughness simulation.
//!
//! All randomness is drawn from ChaCha generators seeded explicitly by the
//! caller; sub-streams (zones, frames) derive their seeds with SplitMix64.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::KeypointPair;
use crate::camera::{FisheyeIntrinsics, PixelPoint};
use crate::error::{Error, Result};
use crate::geometry::{
    default_adjacency, point_to_pixel, Camera, CameraId, CameraRig, Extrinsics, GroundPoint,
};

const MAX_ATTEMPTS_PER_ZONE: usize = 200_000;
/// Pixels closer than this to the image border are not emitted.
const BORDER_MARGIN_PX: f64 = 1.0;

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rotation taking camera axes to vehicle axes for a camera mounted with the
/// given yaw, downward pitch and roll (degrees). At zero angles the optical
/// axis looks along vehicle `+X`, image `u` along `-Y` and image `v` along `-Z`.
pub fn mount_rotation(yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> Matrix3<f64> {
    let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_deg.to_radians());
    let pitch = Rotation3::from_axis_angle(&Vector3::y_axis(), pitch_deg.to_radians());
    let roll = Rotation3::from_axis_angle(&Vector3::x_axis(), roll_deg.to_radians());
    (yaw * pitch * roll).matrix() * base
}

/// Wide-angle lens used by the synthetic rigs (1280x800, about 190 degrees).
pub fn default_intrinsics() -> FisheyeIntrinsics {
    FisheyeIntrinsics::new([335.0, -12.0, 9.0, -2.5], 640.0, 400.0, 1280, 800)
        .expect("valid default lens")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalCamera {
    pub id: CameraId,
    /// Camera centre in the vehicle frame, meters.
    pub center: [f64; 3],
    pub yaw_deg: f64,
    /// Downward tilt of the optical axis.
    pub pitch_deg: f64,
    #[serde(default)]
    pub roll_deg: f64,
    /// Overrides the shared intrinsics for this camera.
    #[serde(default)]
    pub intrinsics: Option<FisheyeIntrinsics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRigSpec {
    pub cameras: Vec<NominalCamera>,
    pub intrinsics: FisheyeIntrinsics,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticRigSpec {
    fn default() -> Self {
        let cam = |id, center, yaw_deg, pitch_deg| NominalCamera {
            id,
            center,
            yaw_deg,
            pitch_deg,
            roll_deg: 0.0,
            intrinsics: None,
        };
        SyntheticRigSpec {
            cameras: vec![
                cam(CameraId::Front, [3.7, 0.0, 0.7], 0.0, 30.0),
                cam(CameraId::Left, [1.9, 1.0, 1.1], 90.0, 50.0),
                cam(CameraId::Rear, [-1.0, 0.0, 0.9], 180.0, 35.0),
                cam(CameraId::Right, [1.9, -1.0, 1.1], -90.0, 50.0),
            ],
            intrinsics: default_intrinsics(),
            seed: 0,
        }
    }
}

impl SyntheticRigSpec {
    pub fn build_rig(&self) -> Result<CameraRig> {
        let cameras = self
            .cameras
            .iter()
            .map(|nc| {
                if nc.center[2] <= 0.0 {
                    return Err(Error::InvalidRig(format!(
                        "camera `{}` must sit above the ground",
                        nc.id
                    )));
                }
                let r = mount_rotation(nc.yaw_deg, nc.pitch_deg, nc.roll_deg);
                Ok(Camera::new(
                    nc.id,
                    nc.intrinsics.unwrap_or(self.intrinsics),
                    Extrinsics::from_pose(&r, Vector3::from(nc.center)),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(cameras, default_adjacency())
    }

    /// Axis-aligned rectangle spanned by the camera centres.
    pub fn footprint(&self) -> Footprint {
        let mut fp = Footprint {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for c in &self.cameras {
            fp.x_min = fp.x_min.min(c.center[0]);
            fp.x_max = fp.x_max.max(c.center[0]);
            fp.y_min = fp.y_min.min(c.center[1]);
            fp.y_max = fp.y_max.max(c.center[1]);
        }
        fp
    }
}

/// Largest keypoint height deviation implied by a road roughness index:
/// `range_m / 1000 * iri` (IRI in m/km).
pub fn iri_height_bound(range_m: f64, iri: f64) -> f64 {
    range_m / 1000.0 * iri
}

/// Keypoints generated from known ground points.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SyntheticKeypoints {
    pub keypoints: Vec<KeypointPair>,
    /// Generating 3D point (vehicle frame) of each keypoint.
    pub points: Vec<[f64; 3]>,
}

impl SyntheticKeypoints {
    pub fn extend(&mut self, other: SyntheticKeypoints) {
        self.keypoints.extend(other.keypoints);
        self.points.extend(other.points);
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Projects a vehicle-frame point into `cam`, requiring it to land inside the
/// image with a small border margin.
pub fn observe(point: &Vector3<f64>, cam: &Camera) -> Option<PixelPoint> {
    let px = point_to_pixel(point, cam).ok()?;
    let w = f64::from(cam.intrinsics.width());
    let h = f64::from(cam.intrinsics.height());
    let inside = px.u >= BORDER_MARGIN_PX
        && px.v >= BORDER_MARGIN_PX
        && px.u <= w - 1.0 - BORDER_MARGIN_PX
        && px.v <= h - 1.0 - BORDER_MARGIN_PX;
    inside.then_some(px)
}

/// Samples `n_per_zone` ground points per adjacency pair, uniformly over the
/// annulus `[min_range, max_range]` around the vehicle origin, keeping those
/// visible in both cameras of the pair.
pub fn generate_keypoints(
    rig: &CameraRig,
    n_per_zone: usize,
    min_range: f64,
    max_range: f64,
    seed: u64,
    frame_id: &str,
) -> Result<SyntheticKeypoints> {
    if n_per_zone == 0 {
        return Err(Error::InvalidProblem("n_per_zone must be at least 1".into()));
    }
    if !(min_range >= 0.0 && max_range > min_range) {
        return Err(Error::InvalidProblem(format!(
            "invalid keypoint range [{min_range}, {max_range}]"
        )));
    }
    let mut out = SyntheticKeypoints::default();
    for (zone, &(a, b)) in rig.adjacency().iter().enumerate() {
        let cam_a = rig.camera(a).expect("adjacency references rig cameras");
        let cam_b = rig.camera(b).expect("adjacency references rig cameras");
        let mut rng = rng(derive_seed(seed, zone as u64));
        let mut found = 0;
        for _ in 0..MAX_ATTEMPTS_PER_ZONE {
            if found == n_per_zone {
                break;
            }
            let r = rng
                .random_range(min_range * min_range..=max_range * max_range)
                .sqrt();
            let phi = rng.random_range(-PI..PI);
            let g = GroundPoint::new(r * phi.cos(), r * phi.sin()).to_vector();
            if let (Some(pa), Some(pb)) = (observe(&g, cam_a), observe(&g, cam_b)) {
                out.keypoints.push(KeypointPair::new(frame_id, a, b, pa, pb));
                out.points.push([g.x, g.y, g.z]);
                found += 1;
            }
        }
        if found < n_per_zone {
            return Err(Error::ZoneGeometry {
                cam_i: a,
                cam_j: b,
                requested: n_per_zone,
                found,
            });
        }
    }
    Ok(out)
}

/// Re-observes generating points (possibly off the ground) in their keypoint
/// cameras. Points that leave either image are dropped.
pub fn reobserve(rig: &CameraRig, template: &SyntheticKeypoints, points: &[Vector3<f64>]) -> SyntheticKeypoints {
    let mut out = SyntheticKeypoints::default();
    for (kp, p) in template.keypoints.iter().zip(points) {
        let (Some(ci), Some(cj)) = (rig.camera(kp.cam_i), rig.camera(kp.cam_j)) else {
            continue;
        };
        if let (Some(pi), Some(pj)) = (observe(p, ci), observe(p, cj)) {
            out.keypoints
                .push(KeypointPair::new(kp.frame_id.clone(), kp.cam_i, kp.cam_j, pi, pj));
            out.points.push([p.x, p.y, p.z]);
        }
    }
    out
}

/// Adds isotropic Gaussian noise to every pixel observation.
pub fn add_pixel_noise(keypoints: &[KeypointPair], sigma_px: f64, seed: u64) -> Vec<KeypointPair> {
    if sigma_px <= 0.0 {
        return keypoints.to_vec();
    }
    let normal = Normal::new(0.0, sigma_px).expect("positive sigma");
    let mut rng = rng(seed);
    keypoints
        .iter()
        .map(|kp| {
            let mut kp = kp.clone();
            kp.pixel_i.u += normal.sample(&mut rng);
            kp.pixel_i.v += normal.sample(&mut rng);
            kp.pixel_j.u += normal.sample(&mut rng);
            kp.pixel_j.v += normal.sample(&mut rng);
            kp
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoughnessMode {
    Slope,
    Random,
}

/// Axis-aligned vehicle outline in the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoughnessSpec {
    pub mode: RoughnessMode,
    /// Maximum height deviation of a keypoint, meters.
    pub delta_z: f64,
    /// Keypoint selection radius, meters.
    pub range: f64,
    /// Road roughness, m/km.
    pub iri: f64,
    pub seed: u64,
    /// Slopes start at the edges of this rectangle.
    pub footprint: Footprint,
}

impl RoughnessSpec {
    /// Height bound derived from `range` and `iri`.
    pub fn from_iri(mode: RoughnessMode, range: f64, iri: f64, seed: u64, footprint: Footprint) -> Self {
        RoughnessSpec {
            mode,
            delta_z: iri_height_bound(range, iri),
            range,
            iri,
            seed,
            footprint,
        }
    }

    pub fn with_delta_z(mode: RoughnessMode, delta_z: f64, seed: u64, footprint: Footprint) -> Self {
        RoughnessSpec {
            mode,
            delta_z,
            range: 20.0,
            iri: 6.0,
            seed,
            footprint,
        }
    }

    /// Height of the slope surface at `(x, y)`: every side of the footprint
    /// rises linearly from 0 at its edge to `delta_z` at `range` meters from
    /// the origin along that side's axis; corners take the larger side value.
    pub fn slope_height(&self, x: f64, y: f64) -> f64 {
        let fp = &self.footprint;
        let side = |dist: f64, edge: f64| -> f64 {
            if dist <= 0.0 {
                return 0.0;
            }
            let run = (self.range - edge.abs()).max(f64::EPSILON);
            (self.delta_z * dist / run).min(self.delta_z)
        };
        let front = side(x - fp.x_max, fp.x_max);
        let rear = side(fp.x_min - x, fp.x_min);
        let left = side(y - fp.y_max, fp.y_max);
        let right = side(fp.y_min - y, fp.y_min);
        front.max(rear).max(left).max(right)
    }
}

/// Lifts ground points off the plane according to `spec`.
pub fn apply_height_noise(points: &[GroundPoint], spec: &RoughnessSpec) -> Vec<Vector3<f64>> {
    if spec.delta_z <= 0.0 {
        return points.iter().map(|g| g.to_vector()).collect();
    }
    match spec.mode {
        RoughnessMode::Slope => points
            .iter()
            .map(|g| Vector3::new(g.x, g.y, spec.slope_height(g.x, g.y)))
            .collect(),
        RoughnessMode::Random => {
            let mut rng = rng(spec.seed);
            points
                .iter()
                .map(|g| Vector3::new(g.x, g.y, rng.random_range(0.0..=spec.delta_z)))
                .collect()
        }
    }
}

/// Random pose offsets: each camera centre moves by up to
/// `translation_mag` along vehicle `X` and `Y` (height untouched), and each
/// orientation rotates by up to `rotation_mag_deg` about a random axis.
pub fn perturb_rig(rig: &CameraRig, translation_mag: f64, rotation_mag_deg: f64, seed: u64) -> CameraRig {
    let mut rng = rng(seed);
    let extrinsics: Vec<Extrinsics> = rig
        .cameras()
        .iter()
        .map(|cam| {
            let dx = rng.random_range(-1.0..=1.0) * translation_mag;
            let dy = rng.random_range(-1.0..=1.0) * translation_mag;
            let axis = loop {
                let v = Vector3::new(
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                );
                let n = v.norm();
                if n > 1e-3 && n <= 1.0 {
                    break Unit::new_normalize(v);
                }
            };
            let angle = rng.random_range(-1.0..=1.0) * rotation_mag_deg.to_radians();
            if translation_mag == 0.0 && rotation_mag_deg == 0.0 {
                return cam.extrinsics;
            }
            let delta = Rotation3::from_axis_angle(&axis, angle);
            let r_cv = delta.matrix() * cam.extrinsics.camera_to_vehicle_rotation();
            let c = cam.extrinsics.center() + Vector3::new(dx, dy, 0.0);
            Extrinsics::from_pose(&r_cv, c)
        })
        .collect();
    rig.with_extrinsics(&extrinsics)
}

/// Pose difference of one camera, `b` relative to `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPoseError {
    pub id: CameraId,
    pub dtx: f64,
    pub dty: f64,
    pub droll: f64,
    pub dpitch: f64,
    pub dyaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaxMean {
    pub max: f64,
    pub mean: f64,
}

impl MaxMean {
    pub fn of_abs(values: impl Iterator<Item = f64>) -> Self {
        let (mut max, mut sum, mut n) = (0.0f64, 0.0, 0usize);
        for v in values {
            max = max.max(v.abs());
            sum += v.abs();
            n += 1;
        }
        MaxMean {
            max,
            mean: if n > 0 { sum / n as f64 } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    pub per_camera: Vec<CameraPoseError>,
    pub tx: MaxMean,
    pub ty: MaxMean,
    pub roll: MaxMean,
    pub pitch: MaxMean,
    pub yaw: MaxMean,
}

impl PoseErrorReport {
    /// Largest absolute centre offset, meters.
    pub fn max_translation(&self) -> f64 {
        self.tx.max.max(self.ty.max)
    }

    /// Largest absolute Euler-angle offset, degrees.
    pub fn max_angle(&self) -> f64 {
        self.roll.max.max(self.pitch.max).max(self.yaw.max)
    }
}

/// Intrinsic Z-Y-X decomposition `R = Rz(yaw) Ry(pitch) Rx(roll)`, radians.
pub fn euler_zyx(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    (roll, pitch, yaw)
}

/// Per-camera centre offsets (meters) and rotation offsets (degrees,
/// vehicle-frame Z-Y-X Euler angles of `R_b * R_a^T`) of `b` relative to `a`.
pub fn pose_error(a: &CameraRig, b: &CameraRig) -> Result<PoseErrorReport> {
    if a.cameras().len() != b.cameras().len() {
        return Err(Error::InvalidRig("rigs have different cameras".into()));
    }
    let mut per_camera = Vec::with_capacity(4);
    for cam_a in a.cameras() {
        let cam_b = b.camera(cam_a.id).ok_or_else(|| {
            Error::InvalidRig(format!("camera `{}` missing from the second rig", cam_a.id))
        })?;
        let dc = cam_b.extrinsics.center() - cam_a.extrinsics.center();
        let dr = cam_b.extrinsics.camera_to_vehicle_rotation()
            * cam_a.extrinsics.camera_to_vehicle_rotation().transpose();
        let (roll, pitch, yaw) = euler_zyx(&dr);
        per_camera.push(CameraPoseError {
            id: cam_a.id,
            dtx: dc.x,
            dty: dc.y,
            droll: roll.to_degrees(),
            dpitch: pitch.to_degrees(),
            dyaw: yaw.to_degrees(),
        });
    }
    Ok(PoseErrorReport {
        tx: MaxMean::of_abs(per_camera.iter().map(|e| e.dtx)),
        ty: MaxMean::of_abs(per_camera.iter().map(|e| e.dty)),
        roll: MaxMean::of_abs(per_camera.iter().map(|e| e.droll)),
        pitch: MaxMean::of_abs(per_camera.iter().map(|e| e.dpitch)),
        yaw: MaxMean::of_abs(per_camera.iter().map(|e| e.dyaw)),
        per_camera,
    })
}

/// Applies the planar rigid motion (rotation about vehicle `Z` plus `X`/`Y`
/// shift) that best maps the camera centres of `estimate` onto those of
/// `reference` in the least-squares sense.
///
/// Ground reprojection errors do not change under such a motion of the whole
/// rig, so keypoints alone cannot pin it down; comparisons against a ground
/// truth go through this alignment first.
pub fn align_planar(estimate: &CameraRig, reference: &CameraRig) -> Result<CameraRig> {
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = estimate
        .cameras()
        .iter()
        .map(|c| {
            reference
                .camera(c.id)
                .map(|r| (c.extrinsics.center(), r.extrinsics.center()))
                .ok_or_else(|| Error::InvalidRig(format!("camera `{}` missing from reference", c.id)))
        })
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    let (mut ex, mut ey, mut rx, mut ry) = (0.0, 0.0, 0.0, 0.0);
    for (e, r) in &pairs {
        ex += e.x;
        ey += e.y;
        rx += r.x;
        ry += r.y;
    }
    let (ex, ey, rx, ry) = (ex / n, ey / n, rx / n, ry / n);
    let (mut dot, mut cross) = (0.0, 0.0);
    for (e, r) in &pairs {
        let (ax, ay) = (e.x - ex, e.y - ey);
        let (bx, by) = (r.x - rx, r.y - ry);
        dot += ax * bx + ay * by;
        cross += ax * by - ay * bx;
    }
    let phi = cross.atan2(dot);
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), phi);
    let shift = Vector3::new(rx, ry, 0.0) - rot * Vector3::new(ex, ey, 0.0);
    let extrinsics: Vec<Extrinsics> = estimate
        .cameras()
        .iter()
        .map(|c| {
            let center = rot * c.extrinsics.center() + shift;
            let r_cv = rot.matrix() * c.extrinsics.camera_to_vehicle_rotation();
            Extrinsics::from_pose(&r_cv, center)
        })
        .collect();
    Ok(estimate.with_extrinsics(&extrinsics))
}

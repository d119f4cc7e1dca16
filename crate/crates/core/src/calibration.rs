//! Keypoint reprojection objective and rig calibration.
//!
//! Each keypoint is a ground point clicked in two adjacent cameras. Its error
//! is the ground-plane distance between the two reprojections, and the
//! objective is the plain sum of these distances over every keypoint of every
//! frame. Camera heights are frozen, which removes the global scale from the
//! search space.
//!
//! Parameter layout, per camera in rig order: `[cx, cy, qw, qx, qy, qz]`,
//! where `(cx, cy)` is the camera centre in the vehicle frame and the
//! quaternion (vehicle-to-camera) is normalized on decode.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_to_ray, PixelPoint};
use crate::error::{Error, Result};
use crate::geometry::{pixel_to_ground, CameraId, CameraRig, Extrinsics, GroundPoint, Quaternion};
use crate::optimize::{self, BfgsConfig, Termination};

/// Contribution of a keypoint whose ray misses the ground, in meters.
pub const INFEASIBLE_PENALTY: f64 = 1e3;

pub const PARAMS_PER_CAMERA: usize = 6;

/// Fraction of keypoints that must reach the ground under the initial rig.
pub const MIN_FEASIBLE_FRACTION: f64 = 0.8;

pub type FixedHeights = BTreeMap<CameraId, f64>;

/// One ground point observed by two adjacent cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointPair {
    pub frame_id: String,
    pub cam_i: CameraId,
    pub cam_j: CameraId,
    pub pixel_i: PixelPoint,
    pub pixel_j: PixelPoint,
}

impl KeypointPair {
    pub fn new(
        frame_id: impl Into<String>,
        cam_i: CameraId,
        cam_j: CameraId,
        pixel_i: PixelPoint,
        pixel_j: PixelPoint,
    ) -> Self {
        KeypointPair {
            frame_id: frame_id.into(),
            cam_i,
            cam_j,
            pixel_i,
            pixel_j,
        }
    }

    /// Checks the pair against the rig: distinct adjacent cameras and pixels
    /// inside the respective images.
    pub fn validate(&self, rig: &CameraRig) -> Result<()> {
        if self.cam_i == self.cam_j {
            return Err(Error::InvalidKeypoint(format!(
                "both observations come from `{}`",
                self.cam_i
            )));
        }
        if !rig.are_adjacent(self.cam_i, self.cam_j) {
            return Err(Error::InvalidKeypoint(format!(
                "`{}`-`{}` is not an adjacent camera pair",
                self.cam_i, self.cam_j
            )));
        }
        for (cam, px) in [(self.cam_i, self.pixel_i), (self.cam_j, self.pixel_j)] {
            let camera = rig
                .camera(cam)
                .ok_or_else(|| Error::InvalidKeypoint(format!("unknown camera `{cam}`")))?;
            if !px.is_finite() || !camera.intrinsics.contains(px) {
                return Err(Error::InvalidKeypoint(format!(
                    "pixel ({}, {}) outside the {}x{} image of `{cam}`",
                    px.u,
                    px.v,
                    camera.intrinsics.width(),
                    camera.intrinsics.height()
                )));
            }
        }
        Ok(())
    }

    /// Unordered zone key `(min, max)` of the camera pair.
    pub fn zone(&self) -> (CameraId, CameraId) {
        zone_key(self.cam_i, self.cam_j)
    }
}

pub fn zone_key(a: CameraId, b: CameraId) -> (CameraId, CameraId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// How the solver obtains the objective gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Closed-form derivative of the ground reprojections.
    #[default]
    Analytic,
    /// Central differences with step `finite_diff_step * max(1, |x_i|)`.
    CentralDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub gradient: GradientMode,
    pub finite_diff_step: f64,
    /// Zones with fewer keypoints than this only trigger a warning.
    pub warn_min_keypoints_per_zone: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            gradient: GradientMode::Analytic,
            finite_diff_step: 1e-6,
            warn_min_keypoints_per_zone: 10,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || !(self.gradient_tolerance > 0.0)
            || !(self.finite_diff_step > 0.0)
            || self.warn_min_keypoints_per_zone == 0
        {
            return Err(Error::InvalidProblem(format!(
                "solver settings must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn bfgs(&self) -> BfgsConfig {
        BfgsConfig {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            finite_diff_step: self.finite_diff_step,
            ..BfgsConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub rig_initial: CameraRig,
    pub keypoints: Vec<KeypointPair>,
    pub fixed_heights: FixedHeights,
    pub solver: SolverConfig,
}

impl CalibrationProblem {
    /// Validates every keypoint, the heights and the solver settings, and
    /// requires at least one keypoint in each overlap zone.
    pub fn new(
        rig_initial: CameraRig,
        keypoints: Vec<KeypointPair>,
        fixed_heights: FixedHeights,
        solver: SolverConfig,
    ) -> Result<Self> {
        solver.validate()?;
        for id in rig_initial.ids() {
            match fixed_heights.get(&id) {
                Some(h) if h.is_finite() && *h > 0.0 => {}
                Some(h) => {
                    return Err(Error::InvalidProblem(format!(
                        "fixed height {h} of `{id}` must be positive"
                    )))
                }
                None => {
                    return Err(Error::InvalidProblem(format!(
                        "no fixed height for camera `{id}`"
                    )))
                }
            }
        }
        for (k, kp) in keypoints.iter().enumerate() {
            kp.validate(&rig_initial)
                .map_err(|e| Error::InvalidKeypoint(format!("keypoint {k}: {e}")))?;
        }
        let counts = zone_counts(&keypoints);
        for &(a, b) in rig_initial.adjacency() {
            let n = counts.get(&zone_key(a, b)).copied().unwrap_or(0);
            if n == 0 {
                return Err(Error::InvalidProblem(format!(
                    "no keypoints in overlap zone `{a}`-`{b}`"
                )));
            }
            if n < solver.warn_min_keypoints_per_zone {
                log::warn!(
                    "zone {a}-{b} has {n} keypoints, fewer than the recommended {}",
                    solver.warn_min_keypoints_per_zone
                );
            }
        }
        Ok(CalibrationProblem {
            rig_initial,
            keypoints,
            fixed_heights,
            solver,
        })
    }

    /// Problem whose fixed heights are taken from the initial rig.
    pub fn with_rig_heights(
        rig_initial: CameraRig,
        keypoints: Vec<KeypointPair>,
        solver: SolverConfig,
    ) -> Result<Self> {
        let heights = rig_heights(&rig_initial);
        Self::new(rig_initial, keypoints, heights, solver)
    }
}

/// Keypoint count per unordered camera pair.
pub fn zone_counts(keypoints: &[KeypointPair]) -> BTreeMap<(CameraId, CameraId), usize> {
    let mut counts = BTreeMap::new();
    for kp in keypoints {
        *counts.entry(kp.zone()).or_insert(0) += 1;
    }
    counts
}

/// Camera-centre heights of a rig.
pub fn rig_heights(rig: &CameraRig) -> FixedHeights {
    rig.cameras().iter().map(|c| (c.id, c.height())).collect()
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub rig_optimized: CameraRig,
    pub objective_initial: f64,
    pub objective_final: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Error of every keypoint under the optimized rig; infeasible keypoints
    /// carry [`INFEASIBLE_PENALTY`].
    pub per_keypoint_errors: Vec<f64>,
    /// Objective after each accepted solver step.
    pub trajectory: Vec<f64>,
}

/// Ground reprojections of both observations of a keypoint.
pub fn ground_reprojections(kp: &KeypointPair, rig: &CameraRig) -> Result<(GroundPoint, GroundPoint)> {
    let cam_i = rig
        .camera(kp.cam_i)
        .ok_or_else(|| Error::InvalidKeypoint(format!("unknown camera `{}`", kp.cam_i)))?;
    let cam_j = rig
        .camera(kp.cam_j)
        .ok_or_else(|| Error::InvalidKeypoint(format!("unknown camera `{}`", kp.cam_j)))?;
    let gi = pixel_to_ground(kp.pixel_i, cam_i)?.point;
    let gj = pixel_to_ground(kp.pixel_j, cam_j)?.point;
    Ok((gi, gj))
}

/// Ground-plane distance between the two reprojections of a keypoint.
pub fn reprojection_error(kp: &KeypointPair, rig: &CameraRig) -> Result<f64> {
    let (gi, gj) = ground_reprojections(kp, rig)?;
    Ok(gi.distance(&gj))
}

pub fn param_count(rig: &CameraRig) -> usize {
    rig.cameras().len() * PARAMS_PER_CAMERA
}

pub fn encode_params(rig: &CameraRig) -> Vec<f64> {
    let mut params = Vec::with_capacity(param_count(rig));
    for cam in rig.cameras() {
        let c = cam.extrinsics.center();
        params.push(c.x);
        params.push(c.y);
        params.extend_from_slice(&cam.extrinsics.q.to_array());
    }
    params
}

/// Rebuilds a rig from `params`, taking ids, intrinsics and adjacency from
/// `template` and each camera-centre height from `fixed_heights`.
pub fn decode_params(
    template: &CameraRig,
    params: &[f64],
    fixed_heights: &FixedHeights,
) -> Result<CameraRig> {
    let expected = param_count(template);
    if params.len() != expected {
        return Err(Error::ParamLength {
            got: params.len(),
            expected,
        });
    }
    let mut extrinsics = Vec::with_capacity(template.cameras().len());
    for (cam, chunk) in template.cameras().iter().zip(params.chunks_exact(PARAMS_PER_CAMERA)) {
        let height = *fixed_heights.get(&cam.id).ok_or_else(|| {
            Error::InvalidProblem(format!("no fixed height for camera `{}`", cam.id))
        })?;
        let q = Quaternion::new(chunk[2], chunk[3], chunk[4], chunk[5])?;
        extrinsics.push(Extrinsics::from_center(
            q,
            Vector3::new(chunk[0], chunk[1], height),
        ));
    }
    Ok(template.with_extrinsics(&extrinsics))
}

/// Per-keypoint errors under `rig`; `None` marks a keypoint whose ray misses the ground.
pub fn keypoint_errors(keypoints: &[KeypointPair], rig: &CameraRig) -> Vec<Option<f64>> {
    keypoints
        .iter()
        .map(|kp| reprojection_error(kp, rig).ok())
        .collect()
}

fn penalized_sum(errors: &[Option<f64>]) -> f64 {
    errors
        .iter()
        .map(|e| e.unwrap_or(INFEASIBLE_PENALTY))
        .sum()
}

/// Sum of keypoint errors for the rig encoded in `params`. Keypoints that
/// cannot be reprojected add [`INFEASIBLE_PENALTY`] each.
pub fn objective(params: &[f64], problem: &CalibrationProblem) -> Result<f64> {
    let expected = param_count(&problem.rig_initial);
    if params.len() != expected {
        return Err(Error::ParamLength {
            got: params.len(),
            expected,
        });
    }
    match decode_params(&problem.rig_initial, params, &problem.fixed_heights) {
        Ok(rig) => Ok(penalized_sum(&keypoint_errors(&problem.keypoints, &rig))),
        Err(Error::InvalidQuaternion(_)) => {
            Ok(problem.keypoints.len() as f64 * INFEASIBLE_PENALTY)
        }
        Err(e) => Err(e),
    }
}

/// Homogeneous rotation matrix of an unnormalized quaternion: equals
/// `|q|^2` times the rotation of `q / |q|`.
fn quat_quadratic(q: &[f64]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}

/// Partial derivatives of [`quat_quadratic`] with respect to `w, x, y, z`.
fn quat_quadratic_partials(q: &[f64]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(w, -z, y, z, w, -x, -y, x, w) * 2.0,
        Matrix3::new(x, y, z, y, -x, -w, z, w, -x) * 2.0,
        Matrix3::new(-y, x, w, x, y, z, -w, z, -y) * 2.0,
        Matrix3::new(-z, -w, x, w, -z, y, x, y, z) * 2.0,
    ]
}

/// Ground point of a camera-frame ray under one camera's parameter block,
/// plus its 2x6 Jacobian (columns follow the block layout) when requested.
///
/// With `m = M(q)^T S`, the ray direction in the vehicle frame is `m / |q|^2`
/// and the ground point is `c_xy - h * m_xy / m_z`.
fn ground_of_block(
    block: &[f64],
    height: f64,
    ray: &Vector3<f64>,
    jacobian: Option<&mut [[f64; PARAMS_PER_CAMERA]; 2]>,
) -> Option<[f64; 2]> {
    let q = &block[2..6];
    let n2 = q.iter().map(|v| v * v).sum::<f64>();
    let m = quat_quadratic(q).transpose() * ray;
    if !(m.z / n2 < -1e-6) {
        return None;
    }
    let gx = block[0] - height * m.x / m.z;
    let gy = block[1] - height * m.y / m.z;
    if let Some(jac) = jacobian {
        *jac = [[0.0; PARAMS_PER_CAMERA]; 2];
        jac[0][0] = 1.0;
        jac[1][1] = 1.0;
        let mz2 = m.z * m.z;
        for (k, dq) in quat_quadratic_partials(q).iter().enumerate() {
            let dm = dq.transpose() * ray;
            jac[0][2 + k] = -height * (dm.x * m.z - m.x * dm.z) / mz2;
            jac[1][2 + k] = -height * (dm.y * m.z - m.y * dm.z) / mz2;
        }
    }
    Some([gx, gy])
}

/// Camera index and camera-frame ray of both observations of a keypoint.
type Observation = [(usize, Vector3<f64>); 2];

/// The objective with pixel rays precomputed, which also provides its exact
/// gradient. Agrees with [`objective`] up to rounding.
#[derive(Debug, Clone)]
pub struct PreparedObjective {
    n_params: usize,
    heights: Vec<f64>,
    /// `None` when a pixel lies beyond the lens model's range.
    observations: Vec<Option<Observation>>,
}

impl PreparedObjective {
    pub fn new(problem: &CalibrationProblem) -> Result<Self> {
        let rig = &problem.rig_initial;
        let heights = rig
            .cameras()
            .iter()
            .map(|c| {
                problem.fixed_heights.get(&c.id).copied().ok_or_else(|| {
                    Error::InvalidProblem(format!("no fixed height for camera `{}`", c.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let observe = |cam: CameraId, px: PixelPoint| -> Result<Option<(usize, Vector3<f64>)>> {
            let idx = rig
                .index_of(cam)
                .ok_or_else(|| Error::InvalidKeypoint(format!("unknown camera `{cam}`")))?;
            Ok(pixel_to_ray(px, &rig.cameras()[idx].intrinsics)
                .ok()
                .map(|ray| (idx, ray.to_vector())))
        };
        let observations = problem
            .keypoints
            .iter()
            .map(|kp| {
                let a = observe(kp.cam_i, kp.pixel_i)?;
                let b = observe(kp.cam_j, kp.pixel_j)?;
                Ok(a.zip(b).map(|(a, b)| [a, b]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedObjective {
            n_params: param_count(rig),
            heights,
            observations,
        })
    }

    fn degenerate(&self, params: &[f64]) -> bool {
        params.chunks_exact(PARAMS_PER_CAMERA).any(|b| {
            let n = b[2..6].iter().map(|v| v * v).sum::<f64>().sqrt();
            !(n >= 1e-8) || !n.is_finite()
        })
    }

    /// Per-keypoint errors; `None` marks an infeasible keypoint.
    pub fn errors(&self, params: &[f64]) -> Vec<Option<f64>> {
        assert_eq!(params.len(), self.n_params, "parameter vector length");
        if self.degenerate(params) {
            return vec![None; self.observations.len()];
        }
        self.observations
            .iter()
            .map(|obs| {
                let [(ci, ri), (cj, rj)] = obs.as_ref()?;
                let gi = ground_of_block(self.block(params, *ci), self.heights[*ci], ri, None)?;
                let gj = ground_of_block(self.block(params, *cj), self.heights[*cj], rj, None)?;
                Some((gi[0] - gj[0]).hypot(gi[1] - gj[1]))
            })
            .collect()
    }

    pub fn value(&self, params: &[f64]) -> f64 {
        penalized_sum(&self.errors(params))
    }

    /// Exact gradient. Infeasible keypoints contribute nothing (the penalty
    /// is constant) and a vanishing error contributes zero.
    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        assert_eq!(params.len(), self.n_params, "parameter vector length");
        let mut grad = vec![0.0; self.n_params];
        if self.degenerate(params) {
            return grad;
        }
        let mut jac_i = [[0.0; PARAMS_PER_CAMERA]; 2];
        let mut jac_j = [[0.0; PARAMS_PER_CAMERA]; 2];
        for obs in self.observations.iter().flatten() {
            let [(ci, ri), (cj, rj)] = obs;
            let gi = ground_of_block(self.block(params, *ci), self.heights[*ci], ri, Some(&mut jac_i));
            let gj = ground_of_block(self.block(params, *cj), self.heights[*cj], rj, Some(&mut jac_j));
            let (Some(gi), Some(gj)) = (gi, gj) else {
                continue;
            };
            let (dx, dy) = (gi[0] - gj[0], gi[1] - gj[1]);
            let e = dx.hypot(dy);
            if e == 0.0 {
                continue;
            }
            let (ux, uy) = (dx / e, dy / e);
            for k in 0..PARAMS_PER_CAMERA {
                grad[ci * PARAMS_PER_CAMERA + k] += ux * jac_i[0][k] + uy * jac_i[1][k];
                grad[cj * PARAMS_PER_CAMERA + k] -= ux * jac_j[0][k] + uy * jac_j[1][k];
            }
        }
        grad
    }

    fn block<'a>(&self, params: &'a [f64], cam: usize) -> &'a [f64] {
        &params[cam * PARAMS_PER_CAMERA..(cam + 1) * PARAMS_PER_CAMERA]
    }
}

/// Minimizes the objective over all four poses jointly with BFGS.
pub fn calibrate(problem: &CalibrationProblem) -> Result<CalibrationResult> {
    let x0 = encode_params(&problem.rig_initial);
    let prepared = PreparedObjective::new(problem)?;
    let feasible = prepared.errors(&x0).iter().filter(|e| e.is_some()).count();
    let total = problem.keypoints.len();
    if (feasible as f64) < MIN_FEASIBLE_FRACTION * total as f64 {
        return Err(Error::BadInitialization { feasible, total });
    }

    let f = |x: &[f64]| prepared.value(x);
    let cfg = problem.solver.bfgs();
    let report = match problem.solver.gradient {
        GradientMode::Analytic => {
            optimize::minimize_with_gradient(f, |x: &[f64]| prepared.gradient(x), &x0, &cfg)?
        }
        GradientMode::CentralDifference => optimize::minimize(f, &x0, &cfg)?,
    };
    let rig_optimized = canonicalize(decode_params(
        &problem.rig_initial,
        &report.x,
        &problem.fixed_heights,
    )?);
    let per_keypoint_errors: Vec<f64> = prepared
        .errors(&report.x)
        .into_iter()
        .map(|e| e.unwrap_or(INFEASIBLE_PENALTY))
        .collect();
    let objective_final = per_keypoint_errors.iter().sum();
    log::info!(
        "calibration: J {:.6} -> {:.6} m in {} iterations ({:?})",
        report.f_initial,
        objective_final,
        report.iterations,
        report.termination
    );
    Ok(CalibrationResult {
        rig_optimized,
        objective_initial: report.f_initial,
        objective_final,
        iterations: report.iterations,
        converged: report.termination != Termination::MaxIterations,
        termination: report.termination,
        per_keypoint_errors,
        trajectory: report.trajectory,
    })
}

/// Flips quaternions to the `w >= 0` hemisphere.
fn canonicalize(rig: CameraRig) -> CameraRig {
    let extrinsics: Vec<Extrinsics> = rig
        .cameras()
        .iter()
        .map(|c| {
            let q = c.extrinsics.q.to_array();
            if q[0] < 0.0 {
                let flipped = Quaternion::new(-q[0], -q[1], -q[2], -q[3]).expect("unit quaternion");
                Extrinsics::from_center(flipped, c.extrinsics.center)
            } else {
                c.extrinsics
            }
        })
        .collect();
    rig.with_extrinsics(&extrinsics)
}

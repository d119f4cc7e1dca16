//! Python bindings: rigs, keypoints, calibration, metrics, synthetic data
//! and bird's-eye-view rendering.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::Vector3;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use svcalib::bev::{render_bev as render, BevConfig};
use svcalib::calibration::{self, CalibrationProblem, GradientMode, SolverConfig};
use svcalib::camera::{self, PixelPoint};
use svcalib::experiment::{build_scenario, ScenarioConfig};
use svcalib::geometry::{self, CameraId, GroundPoint};
use svcalib::io::{self, KeypointFile, LoadOptions, RigDocument};
use svcalib::metrics;
use svcalib::scene::Scene;
use svcalib::synthetic::{self as synth, SyntheticRigSpec};
use svcalib::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyOSError::new_err(e.to_string()),
        Error::BadInitialization { .. } | Error::SolverFailure(_) | Error::NoConvergence { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn camera_id(s: &str) -> PyResult<CameraId> {
    s.parse().map_err(py_err)
}

#[pyclass(name = "FisheyeIntrinsics", frozen, from_py_object)]
#[derive(Clone)]
struct PyIntrinsics(camera::FisheyeIntrinsics);

#[pymethods]
impl PyIntrinsics {
    #[new]
    #[pyo3(signature = (coeffs, u0, v0, width, height, theta_max = camera::DEFAULT_THETA_MAX))]
    fn new(coeffs: [f64; 4], u0: f64, v0: f64, width: u32, height: u32, theta_max: f64) -> PyResult<Self> {
        camera::FisheyeIntrinsics::with_theta_max(coeffs, u0, v0, width, height, theta_max)
            .map(PyIntrinsics)
            .map_err(py_err)
    }

    /// The 1280x800 lens used by the synthetic rig.
    #[staticmethod]
    fn default() -> Self {
        PyIntrinsics(synth::default_intrinsics())
    }

    #[getter]
    fn coeffs(&self) -> [f64; 4] {
        self.0.coeffs()
    }

    #[getter]
    fn size(&self) -> (u32, u32) {
        (self.0.width(), self.0.height())
    }

    /// Unit ray `(x, y, z)` in the camera frame.
    fn pixel_to_ray(&self, u: f64, v: f64) -> PyResult<(f64, f64, f64)> {
        let s = camera::pixel_to_ray(PixelPoint::new(u, v), &self.0).map_err(py_err)?.to_vector();
        Ok((s.x, s.y, s.z))
    }

    fn ray_to_pixel(&self, x: f64, y: f64, z: f64) -> PyResult<(f64, f64)> {
        let p = camera::ray_to_pixel(&Vector3::new(x, y, z), &self.0).map_err(py_err)?;
        Ok((p.u, p.v))
    }

    fn __repr__(&self) -> String {
        let [a1, a2, a3, a4] = self.0.coeffs();
        format!(
            "FisheyeIntrinsics([{a1}, {a2}, {a3}, {a4}], {}x{})",
            self.0.width(),
            self.0.height()
        )
    }
}

/// `(dtx, dty, droll, dpitch, dyaw)`.
type PoseDelta = (f64, f64, f64, f64, f64);

/// Four-camera rig plus the camera heights held fixed during calibration.
#[pyclass(name = "CameraRig", frozen, from_py_object)]
#[derive(Clone)]
struct PyRig(RigDocument);

impl PyRig {
    fn camera(&self, id: &str) -> PyResult<&geometry::Camera> {
        let id = camera_id(id)?;
        self.0
            .rig
            .camera(id)
            .ok_or_else(|| PyValueError::new_err(format!("rig has no camera `{id}`")))
    }
}

#[pymethods]
impl PyRig {
    #[staticmethod]
    #[pyo3(signature = (path, strict = false))]
    fn load(path: PathBuf, strict: bool) -> PyResult<Self> {
        io::load_rig(&path, LoadOptions { strict }).map(PyRig).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_rig(&path, &self.0).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        io::parse_rig(text, std::path::Path::new("<string>"), LoadOptions::default())
            .map(PyRig)
            .map_err(py_err)
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0.to_file()).expect("serializable rig")
    }

    /// The built-in nominal rig, or one described by a SyntheticRigSpec JSON string.
    #[staticmethod]
    #[pyo3(signature = (spec_json = None))]
    fn synthetic(spec_json: Option<&str>) -> PyResult<Self> {
        let spec: SyntheticRigSpec = match spec_json {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => SyntheticRigSpec::default(),
        };
        spec.build_rig().map(|r| PyRig(RigDocument::from_rig(r))).map_err(py_err)
    }

    #[getter]
    fn camera_ids(&self) -> Vec<String> {
        self.0.rig.cameras().iter().map(|c| c.id.to_string()).collect()
    }

    #[getter]
    fn adjacency(&self) -> Vec<(String, String)> {
        self.0
            .rig
            .adjacency()
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[getter]
    fn fixed_heights(&self) -> BTreeMap<String, f64> {
        self.0.fixed_heights.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn intrinsics(&self, cam: &str) -> PyResult<PyIntrinsics> {
        Ok(PyIntrinsics(self.camera(cam)?.intrinsics))
    }

    /// Camera centre `(x, y, z)` in the vehicle frame.
    fn center(&self, cam: &str) -> PyResult<(f64, f64, f64)> {
        let c = self.camera(cam)?.extrinsics.center();
        Ok((c.x, c.y, c.z))
    }

    /// Vehicle-to-camera rotation as `(w, x, y, z)`.
    fn quaternion(&self, cam: &str) -> PyResult<(f64, f64, f64, f64)> {
        let [w, x, y, z] = self.camera(cam)?.extrinsics.q.to_array();
        Ok((w, x, y, z))
    }

    fn pixel_to_ground(&self, cam: &str, u: f64, v: f64) -> PyResult<(f64, f64)> {
        let hit = geometry::pixel_to_ground(PixelPoint::new(u, v), self.camera(cam)?).map_err(py_err)?;
        Ok((hit.point.x, hit.point.y))
    }

    fn ground_to_pixel(&self, cam: &str, x: f64, y: f64) -> PyResult<(f64, f64)> {
        let p = geometry::ground_to_pixel(GroundPoint::new(x, y), self.camera(cam)?).map_err(py_err)?;
        Ok((p.u, p.v))
    }

    /// Copy with random extrinsic errors of the given magnitudes.
    fn perturbed(&self, translation: f64, rotation_deg: f64, seed: u64) -> Self {
        PyRig(RigDocument {
            rig: synth::perturb_rig(&self.0.rig, translation, rotation_deg, seed),
            fixed_heights: self.0.fixed_heights.clone(),
        })
    }

    /// Per-camera `(dtx, dty, droll, dpitch, dyaw)` against `reference`
    /// (meters, degrees) after removing the unobservable planar motion.
    fn pose_error(&self, reference: &PyRig) -> PyResult<BTreeMap<String, PoseDelta>> {
        let aligned = synth::align_planar(&self.0.rig, &reference.0.rig).map_err(py_err)?;
        let report = synth::pose_error(&reference.0.rig, &aligned).map_err(py_err)?;
        Ok(report
            .per_camera
            .iter()
            .map(|c| (c.id.to_string(), (c.dtx, c.dty, c.droll, c.dpitch, c.dyaw)))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("CameraRig({})", self.camera_ids().join(", "))
    }
}

#[pyclass(name = "KeypointPair", frozen, from_py_object)]
#[derive(Clone)]
struct PyKeypoint(calibration::KeypointPair);

#[pymethods]
impl PyKeypoint {
    #[new]
    fn new(frame_id: String, cam_i: &str, cam_j: &str, pixel_i: (f64, f64), pixel_j: (f64, f64)) -> PyResult<Self> {
        Ok(PyKeypoint(calibration::KeypointPair::new(
            frame_id,
            camera_id(cam_i)?,
            camera_id(cam_j)?,
            PixelPoint::new(pixel_i.0, pixel_i.1),
            PixelPoint::new(pixel_j.0, pixel_j.1),
        )))
    }

    #[getter]
    fn frame_id(&self) -> &str {
        &self.0.frame_id
    }

    #[getter]
    fn cam_i(&self) -> String {
        self.0.cam_i.to_string()
    }

    #[getter]
    fn cam_j(&self) -> String {
        self.0.cam_j.to_string()
    }

    #[getter]
    fn pixel_i(&self) -> (f64, f64) {
        (self.0.pixel_i.u, self.0.pixel_i.v)
    }

    #[getter]
    fn pixel_j(&self) -> (f64, f64) {
        (self.0.pixel_j.u, self.0.pixel_j.v)
    }

    /// Ground-plane distance between the two reprojections under `rig`.
    fn error(&self, rig: &PyRig) -> PyResult<f64> {
        calibration::reprojection_error(&self.0, &rig.0.rig).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "KeypointPair({:?}, {}-{}, ({:.2}, {:.2}), ({:.2}, {:.2}))",
            self.0.frame_id, self.0.cam_i, self.0.cam_j, self.0.pixel_i.u, self.0.pixel_i.v, self.0.pixel_j.u, self.0.pixel_j.v
        )
    }
}

fn pairs(keypoints: &[PyKeypoint]) -> Vec<calibration::KeypointPair> {
    keypoints.iter().map(|k| k.0.clone()).collect()
}

fn wrap(pairs: Vec<calibration::KeypointPair>) -> Vec<PyKeypoint> {
    pairs.into_iter().map(PyKeypoint).collect()
}

#[pyfunction]
#[pyo3(signature = (path, strict = false))]
fn load_keypoints(path: PathBuf, strict: bool) -> PyResult<Vec<PyKeypoint>> {
    let file = io::load_keypoints(&path, LoadOptions { strict }).map_err(py_err)?;
    Ok(wrap(file.pairs()))
}

#[pyfunction]
fn save_keypoints(path: PathBuf, keypoints: Vec<PyKeypoint>) -> PyResult<()> {
    io::save_keypoints(&path, &KeypointFile::from_pairs(&pairs(&keypoints))).map_err(py_err)
}

#[pyclass(name = "CalibrationResult", frozen, get_all)]
struct PyCalibrationResult {
    rig: PyRig,
    objective_initial: f64,
    objective_final: f64,
    iterations: usize,
    converged: bool,
    termination: String,
    per_keypoint_errors: Vec<f64>,
    trajectory: Vec<f64>,
}

#[pymethods]
impl PyCalibrationResult {
    fn __repr__(&self) -> String {
        format!(
            "CalibrationResult(J {:.6} -> {:.6}, {} iterations, {})",
            self.objective_initial, self.objective_final, self.iterations, self.termination
        )
    }
}

/// Optimizes the rig's extrinsics so both observations of every keypoint
/// reproject to the same ground point. Heights default to the rig's fixed heights.
#[pyfunction]
#[pyo3(signature = (rig, keypoints, fixed_heights = None, max_iterations = 500, gradient_tolerance = 1e-8, gradient = "analytic"))]
fn calibrate(
    py: Python<'_>,
    rig: &PyRig,
    keypoints: Vec<PyKeypoint>,
    fixed_heights: Option<BTreeMap<String, f64>>,
    max_iterations: usize,
    gradient_tolerance: f64,
    gradient: &str,
) -> PyResult<PyCalibrationResult> {
    let heights = match fixed_heights {
        Some(map) => map
            .into_iter()
            .map(|(k, v)| Ok((camera_id(&k)?, v)))
            .collect::<PyResult<_>>()?,
        None => rig.0.fixed_heights.clone(),
    };
    let gradient = match gradient {
        "analytic" => GradientMode::Analytic,
        "central_difference" => GradientMode::CentralDifference,
        other => return Err(PyValueError::new_err(format!("unknown gradient mode `{other}`"))),
    };
    let solver = SolverConfig {
        max_iterations,
        gradient_tolerance,
        gradient,
        ..SolverConfig::default()
    };
    let problem = CalibrationProblem::new(rig.0.rig.clone(), pairs(&keypoints), heights, solver).map_err(py_err)?;
    let result = py.detach(|| calibration::calibrate(&problem)).map_err(py_err)?;
    Ok(PyCalibrationResult {
        rig: PyRig(RigDocument {
            rig: result.rig_optimized,
            fixed_heights: problem.fixed_heights,
        }),
        objective_initial: result.objective_initial,
        objective_final: result.objective_final,
        iterations: result.iterations,
        converged: result.converged,
        termination: serde_json::to_value(result.termination)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default(),
        per_keypoint_errors: result.per_keypoint_errors,
        trajectory: result.trajectory,
    })
}

/// Mean distance error: `{"total", "n_keypoints", "per_bin", "per_bin_count", "per_keypoint"}`.
#[pyfunction]
fn mde<'py>(py: Python<'py>, keypoints: Vec<PyKeypoint>, rig: &PyRig) -> PyResult<Bound<'py, PyDict>> {
    let report = metrics::mde(&pairs(&keypoints), &rig.0.rig).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("total", report.total)?;
    d.set_item("n_keypoints", report.n_keypoints)?;
    let bins: BTreeMap<&str, f64> = report.per_bin.iter().map(|(b, v)| (b.label(), *v)).collect();
    let counts: BTreeMap<&str, usize> = report.per_bin_count.iter().map(|(b, v)| (b.label(), *v)).collect();
    d.set_item("per_bin", bins)?;
    d.set_item("per_bin_count", counts)?;
    d.set_item("per_keypoint", report.per_keypoint)?;
    Ok(d)
}

/// Random ground correspondences for every overlap zone of `rig`.
#[pyfunction]
#[pyo3(signature = (rig, n_per_zone, seed, min_range = 2.0, max_range = 15.0, frame_id = "frame000"))]
fn generate_keypoints(
    rig: &PyRig,
    n_per_zone: usize,
    seed: u64,
    min_range: f64,
    max_range: f64,
    frame_id: &str,
) -> PyResult<Vec<PyKeypoint>> {
    let kps = synth::generate_keypoints(&rig.0.rig, n_per_zone, min_range, max_range, seed, frame_id).map_err(py_err)?;
    Ok(wrap(kps.keypoints))
}

/// `(ground_truth, initial, calibration_keypoints, evaluation_keypoints)`;
/// the initial rig carries the ground-truth heights.
#[pyfunction]
#[pyo3(signature = (seed, n_per_zone = 10, eval_per_zone = 5, pixel_noise = 0.0, frames = 1, perturb_translation = 0.1, perturb_rotation_deg = 2.0))]
#[allow(clippy::type_complexity)]
fn synthetic_scenario(
    seed: u64,
    n_per_zone: usize,
    eval_per_zone: usize,
    pixel_noise: f64,
    frames: usize,
    perturb_translation: f64,
    perturb_rotation_deg: f64,
) -> PyResult<(PyRig, PyRig, Vec<PyKeypoint>, Vec<PyKeypoint>)> {
    let cfg = ScenarioConfig {
        n_per_zone,
        eval_per_zone,
        pixel_noise,
        frames,
        perturb_translation,
        perturb_rotation_deg,
        seed,
        ..ScenarioConfig::default()
    };
    let sc = build_scenario(&SyntheticRigSpec::default(), &cfg).map_err(py_err)?;
    let heights = calibration::rig_heights(&sc.ground_truth);
    Ok((
        PyRig(RigDocument::from_rig(sc.ground_truth)),
        PyRig(RigDocument {
            rig: sc.initial,
            fixed_heights: heights,
        }),
        wrap(sc.calibration.keypoints),
        wrap(sc.evaluation.keypoints),
    ))
}

/// Renders the BEV composite of the `<camera>.png|jpg` images in
/// `frame_dir`. Returns `(size, values)` with `values` row-major and NaN
/// where no camera sees the ground; writes PNG or `.npy` when `out` is given.
#[pyfunction]
#[pyo3(signature = (rig, frame_dir, extent = 25.0, ppm = 20.0, out = None))]
fn render_bev(
    py: Python<'_>,
    rig: &PyRig,
    frame_dir: PathBuf,
    extent: f64,
    ppm: f64,
    out: Option<PathBuf>,
) -> PyResult<(usize, Vec<f64>)> {
    let cfg = BevConfig::new(extent, ppm).map_err(py_err)?;
    let rig = rig.0.rig.clone();
    py.detach(move || {
        let images = io::load_frame_dir(&frame_dir, &rig)?;
        let bev = render(&images, &rig, &cfg)?;
        if let Some(path) = out {
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy")) {
                io::save_npy(&path, &bev.composite.raster, Some(&bev.composite.mask))?;
            } else {
                io::save_png(&path, &bev.composite.raster)?;
            }
        }
        let c = &bev.composite;
        let values = (0..cfg.size())
            .flat_map(|row| (0..cfg.size()).map(move |col| (row, col)))
            .map(|(row, col)| if c.is_valid(col, row) { c.raster.gray(col, row) } else { f64::NAN })
            .collect();
        Ok((cfg.size(), values))
    })
    .map_err(py_err)
}

/// Renders every camera of `rig` looking at a flat checkerboard and writes
/// `<camera>.png` into `out_dir`.
#[pyfunction]
#[pyo3(signature = (rig, out_dir, square = 1.0))]
fn render_checkerboard_frame(py: Python<'_>, rig: &PyRig, out_dir: PathBuf, square: f64) -> PyResult<()> {
    let rig = rig.0.rig.clone();
    py.detach(move || {
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
            path: out_dir.clone(),
            source: e,
        })?;
        for (id, img) in Scene::checkerboard(square).render_rig(&rig) {
            io::save_png(&out_dir.join(format!("{id}.png")), &img)?;
        }
        Ok(())
    })
    .map_err(py_err)
}

#[pymodule]
fn pysvcalib(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyRig>()?;
    m.add_class::<PyKeypoint>()?;
    m.add_class::<PyCalibrationResult>()?;
    m.add_function(wrap_pyfunction!(load_keypoints, m)?)?;
    m.add_function(wrap_pyfunction!(save_keypoints, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(mde, m)?)?;
    m.add_function(wrap_pyfunction!(generate_keypoints, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(render_bev, m)?)?;
    m.add_function(wrap_pyfunction!(render_checkerboard_frame, m)?)?;
    Ok(())
}

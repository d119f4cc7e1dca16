use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use svcalib::bev::{render_bev, BevConfig};
use svcalib::calibration::{calibrate, zone_counts, CalibrationProblem, GradientMode, SolverConfig};
use svcalib::camera::PixelPoint;
use svcalib::geometry::CameraId;
use svcalib::io::{self, KeypointEntry, RigDocument};
use svcalib::metrics::{mde, MdeReport};
use svcalib::optimize::Termination;
use svcalib::Error;

use crate::session::Session;

/// Largest BEV edge, in pixels, the service will render.
pub const MAX_BEV_SIZE: usize = 4000;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Schema { .. }
            | Error::Version { .. }
            | Error::InvalidKeypoint(_)
            | Error::InvalidRig(_)
            | Error::InvalidIntrinsics(_)
            | Error::InvalidQuaternion(_) => StatusCode::BAD_REQUEST,
            Error::InvalidProblem(_)
            | Error::BadInitialization { .. }
            | Error::UndefinedMetric(_)
            | Error::MissingImage(_)
            | Error::ShapeMismatch(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": self.status.canonical_reason().unwrap_or("error"),
            "message": self.message,
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/api/session", get(get_session))
        .route("/api/frames/{frame_id}/images/{cam_id}", get(get_image))
        .route(
            "/api/keypoints",
            get(list_keypoints).post(add_keypoint).delete(delete_keypoint_query),
        )
        .route("/api/keypoints/{id}", delete(delete_keypoint))
        .route("/api/calibrate", post(post_calibrate))
        .route("/api/bev", get(get_bev))
        .route("/api/mde", get(get_mde))
        .with_state(session)
}

fn parse_body<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    let text: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}" } else { bytes };
    serde_json::from_slice(text).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Accepts `3`, `"3"` or `W/"3"`.
fn if_match(headers: &HeaderMap) -> ApiResult<Option<u64>> {
    let Some(value) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    let text = value.to_str().unwrap_or("");
    let trimmed = text.trim().trim_start_matches("W/").trim_matches('"');
    trimmed
        .parse()
        .map(Some)
        .map_err(|_| ApiError::bad_request(format!("If-Match `{text}` is not a revision")))
}

fn check_revision(current: u64, headers: &HeaderMap, body: Option<u64>) -> ApiResult<()> {
    match if_match(headers)?.or(body) {
        Some(expected) if expected != current => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("stale revision {expected}, session is at {current}"),
        )),
        _ => Ok(()),
    }
}

fn with_revision(revision: u64, status: StatusCode, body: serde_json::Value) -> Response {
    let mut resp = (status, Json(body)).into_response();
    if let Ok(v) = HeaderValue::from_str(&format!("\"{revision}\"")) {
        resp.headers_mut().insert(header::ETAG, v);
    }
    resp
}

fn zone_summary(entries: &[KeypointEntry]) -> BTreeMap<String, usize> {
    let pairs: Vec<_> = entries.iter().map(KeypointEntry::pair).collect();
    zone_counts(&pairs)
        .into_iter()
        .map(|((a, b), n)| (format!("{a}-{b}"), n))
        .collect()
}

async fn get_session(State(session): State<Arc<Session>>) -> Response {
    let state = session.read();
    let cameras: Vec<_> = state
        .rig
        .rig
        .cameras()
        .iter()
        .map(|c| json!({"id": c.id, "width": c.intrinsics.width(), "height": c.intrinsics.height()}))
        .collect();
    let frames: Vec<_> = state
        .keypoints
        .frames
        .iter()
        .map(|f| json!({"frame_id": f.frame_id, "cameras": f.images.keys().collect::<Vec<_>>()}))
        .collect();
    let body = json!({
        "session_id": session.id(),
        "revision": state.revision,
        "cameras": cameras,
        "adjacency": state.rig.rig.adjacency(),
        "frames": frames,
        "keypoint_count": state.keypoints.keypoints.len(),
        "zone_counts": zone_summary(&state.keypoints.keypoints),
        "has_optimized": state.optimized.is_some(),
        "has_eval_keypoints": state.eval.is_some(),
    });
    with_revision(state.revision, StatusCode::OK, body)
}

async fn get_image(
    State(session): State<Arc<Session>>,
    Path((frame_id, cam_id)): Path<(String, String)>,
) -> ApiResult<Response> {
    let cam: CameraId = cam_id
        .parse()
        .map_err(|_| ApiError::not_found(format!("unknown camera `{cam_id}`")))?;
    let path = {
        let state = session.read();
        if state.keypoints.frame(&frame_id).is_none() {
            return Err(ApiError::not_found(format!("unknown frame `{frame_id}`")));
        }
        session
            .image_path(&state, &frame_id, cam)
            .ok_or_else(|| ApiError::not_found(format!("frame `{frame_id}` has no image for `{cam}`")))?
    };
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::not_found(format!("{}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "image/png",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn list_keypoints(State(session): State<Arc<Session>>) -> Response {
    let state = session.read();
    let body = json!({
        "revision": state.revision,
        "keypoints": state.keypoints.keypoints,
        "zone_counts": zone_summary(&state.keypoints.keypoints),
    });
    with_revision(state.revision, StatusCode::OK, body)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewKeypoint {
    frame_id: String,
    cam_i: CameraId,
    cam_j: CameraId,
    pixel_i: PixelPoint,
    pixel_j: PixelPoint,
    #[serde(default)]
    color_tag: Option<String>,
    #[serde(default)]
    expected_revision: Option<u64>,
}

async fn add_keypoint(State(session): State<Arc<Session>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let req: NewKeypoint = parse_body(&body)?;
    let mut state = session.write();
    check_revision(state.revision, &headers, req.expected_revision)?;
    if state.keypoints.frame(&req.frame_id).is_none() {
        return Err(ApiError::bad_request(format!("unknown frame `{}`", req.frame_id)));
    }
    let mut entry = KeypointEntry {
        id: Some(state.next_keypoint_id),
        frame_id: req.frame_id,
        cam_i: req.cam_i,
        cam_j: req.cam_j,
        pixel_i: req.pixel_i,
        pixel_j: req.pixel_j,
        color_tag: None,
    };
    let pair = entry.pair();
    pair.validate(&state.rig.rig)?;
    let (a, b) = pair.zone();
    entry.color_tag = Some(req.color_tag.unwrap_or_else(|| format!("{a}-{b}")));

    let mut keypoints = state.keypoints.clone();
    keypoints.keypoints.push(entry.clone());
    let revision = session.commit_keypoints(&mut state, keypoints)?;
    Ok(with_revision(
        revision,
        StatusCode::CREATED,
        json!({"revision": revision, "keypoint": entry}),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeleteQuery {
    id: u64,
    #[serde(default)]
    expected_revision: Option<u64>,
}

async fn delete_keypoint_query(
    State(session): State<Arc<Session>>,
    headers: HeaderMap,
    Query(q): Query<DeleteQuery>,
) -> ApiResult<Response> {
    remove_keypoint(&session, &headers, q.id, q.expected_revision)
}

async fn delete_keypoint(
    State(session): State<Arc<Session>>,
    headers: HeaderMap,
    Path(id): Path<u64>,
) -> ApiResult<Response> {
    remove_keypoint(&session, &headers, id, None)
}

fn remove_keypoint(session: &Session, headers: &HeaderMap, id: u64, expected: Option<u64>) -> ApiResult<Response> {
    let mut state = session.write();
    check_revision(state.revision, headers, expected)?;
    let Some(pos) = state.keypoints.keypoints.iter().position(|k| k.id == Some(id)) else {
        return Err(ApiError::not_found(format!("no keypoint with id {id}")));
    };
    let mut keypoints = state.keypoints.clone();
    let removed = keypoints.keypoints.remove(pos);
    let revision = session.commit_keypoints(&mut state, keypoints)?;
    Ok(with_revision(
        revision,
        StatusCode::OK,
        json!({"revision": revision, "removed": removed}),
    ))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrateRequest {
    #[serde(default)]
    max_iterations: Option<usize>,
    #[serde(default)]
    gradient_tolerance: Option<f64>,
    #[serde(default)]
    gradient: Option<GradientMode>,
    #[serde(default)]
    expected_revision: Option<u64>,
}

#[derive(Debug, Serialize)]
struct KeypointError {
    id: Option<u64>,
    frame_id: String,
    cam_i: CameraId,
    cam_j: CameraId,
    error: f64,
}

#[derive(Debug, Serialize)]
struct CalibrateResponse {
    revision: u64,
    /// Revision of the keypoint set the solve used.
    based_on_revision: u64,
    objective_initial: f64,
    objective_final: f64,
    iterations: usize,
    converged: bool,
    termination: Termination,
    per_keypoint: Vec<KeypointError>,
    rig: io::RigFile,
}

async fn post_calibrate(State(session): State<Arc<Session>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let req: CalibrateRequest = parse_body(&body)?;
    let Some(_busy) = session.try_busy() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "a calibration is already running"));
    };
    let (problem, entries, fixed_heights, based_on) = {
        let state = session.read();
        check_revision(state.revision, &headers, req.expected_revision)?;
        let defaults = SolverConfig::default();
        let solver = SolverConfig {
            max_iterations: req.max_iterations.unwrap_or(defaults.max_iterations),
            gradient_tolerance: req.gradient_tolerance.unwrap_or(defaults.gradient_tolerance),
            gradient: req.gradient.unwrap_or(defaults.gradient),
            ..defaults
        };
        let entries = state.keypoints.keypoints.clone();
        let problem = CalibrationProblem::new(
            state.rig.rig.clone(),
            entries.iter().map(KeypointEntry::pair).collect(),
            state.rig.fixed_heights.clone(),
            solver,
        )?;
        (problem, entries, state.rig.fixed_heights.clone(), state.revision)
    };

    let result = tokio::task::spawn_blocking(move || calibrate(&problem))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("solver task failed: {e}")))??;
    log::info!(
        "calibrated revision {based_on}: J {:.6} -> {:.6} in {} iterations ({:?})",
        result.objective_initial,
        result.objective_final,
        result.iterations,
        result.termination
    );

    let doc = RigDocument {
        rig: result.rig_optimized.clone(),
        fixed_heights,
    };
    let rig_file = doc.to_file();
    let revision = {
        let mut state = session.write();
        session.commit_optimized(&mut state, doc)?
    };
    let per_keypoint = entries
        .iter()
        .zip(&result.per_keypoint_errors)
        .map(|(e, &error)| KeypointError {
            id: e.id,
            frame_id: e.frame_id.clone(),
            cam_i: e.cam_i,
            cam_j: e.cam_j,
            error,
        })
        .collect();
    let body = CalibrateResponse {
        revision,
        based_on_revision: based_on,
        objective_initial: result.objective_initial,
        objective_final: result.objective_final,
        iterations: result.iterations,
        converged: result.converged,
        termination: result.termination,
        per_keypoint,
        rig: rig_file,
    };
    let value = serde_json::to_value(&body).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(with_revision(revision, StatusCode::OK, value))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RigChoice {
    #[default]
    Initial,
    Optimized,
}

fn pick_rig(state: &crate::session::State, choice: RigChoice) -> ApiResult<RigDocument> {
    match choice {
        RigChoice::Initial => Ok(state.rig.clone()),
        RigChoice::Optimized => state
            .optimized
            .clone()
            .ok_or_else(|| ApiError::not_found("no optimized rig yet; run POST /api/calibrate first")),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BevQuery {
    #[serde(default)]
    rig: RigChoice,
    extent: Option<f64>,
    ppm: Option<f64>,
    frame: Option<String>,
}

async fn get_bev(State(session): State<Arc<Session>>, Query(q): Query<BevQuery>) -> ApiResult<Response> {
    let defaults = BevConfig::default();
    let cfg = BevConfig::new(q.extent.unwrap_or(defaults.extent), q.ppm.unwrap_or(defaults.resolution))
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    if cfg.size() > MAX_BEV_SIZE {
        return Err(ApiError::bad_request(format!(
            "BEV of {0}x{0} px exceeds the {MAX_BEV_SIZE} px limit",
            cfg.size()
        )));
    }
    let (rig, paths) = {
        let state = session.read();
        let rig = pick_rig(&state, q.rig)?;
        let frame = match &q.frame {
            Some(id) => state
                .keypoints
                .frame(id)
                .ok_or_else(|| ApiError::not_found(format!("unknown frame `{id}`")))?,
            None => state
                .keypoints
                .frames
                .first()
                .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "session has no frames"))?,
        };
        let mut paths = BTreeMap::new();
        for cam in rig.rig.cameras() {
            let path = session.image_path(&state, &frame.frame_id, cam.id).ok_or_else(|| {
                ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("frame `{}` has no image for `{}`", frame.frame_id, cam.id),
                )
            })?;
            paths.insert(cam.id, path);
        }
        (rig, paths)
    };
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, ApiError> {
        let mut images = BTreeMap::new();
        for (id, path) in paths {
            images.insert(id, io::load_image(&path)?);
        }
        let bev = render_bev(&images, &rig.rig, &cfg)?;
        io::encode_png(&bev.composite.raster).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}")))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KeypointSet {
    /// Held-out evaluation keypoints.
    Eval,
    /// The clicked calibration keypoints.
    Clicked,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdeQuery {
    #[serde(default)]
    rig: RigChoice,
    set: Option<KeypointSet>,
}

#[derive(Debug, Serialize)]
struct MdeResponse {
    revision: u64,
    rig: RigChoice,
    set: KeypointSet,
    #[serde(flatten)]
    report: MdeReport,
}

async fn get_mde(State(session): State<Arc<Session>>, Query(q): Query<MdeQuery>) -> ApiResult<Response> {
    let state = session.read();
    let rig = pick_rig(&state, q.rig)?;
    let set = q.set.unwrap_or(if state.eval.is_some() { KeypointSet::Eval } else { KeypointSet::Clicked });
    let file = match set {
        KeypointSet::Eval => state
            .eval
            .as_ref()
            .ok_or_else(|| ApiError::not_found("session has no held-out keypoints"))?,
        KeypointSet::Clicked => &state.keypoints,
    };
    let report = mde(&file.pairs(), &rig.rig)?;
    let body = MdeResponse {
        revision: state.revision,
        rig: q.rig,
        set,
        report,
    };
    let value = serde_json::to_value(&body).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(with_revision(state.revision, StatusCode::OK, value))
}

//! File formats: rig and keypoint JSON documents, image loading, PNG and NPY
//! output.
//!
//! Loading goes through a strictness switch. In strict mode an unknown field
//! is a schema error; otherwise it is logged and skipped. Schema errors carry
//! the JSON path of the offending value.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use nalgebra::Vector3;
use serde_json::Value;

use crate::calibration::{rig_heights, FixedHeights, KeypointPair};
use crate::camera::{FisheyeIntrinsics, PixelPoint, DEFAULT_THETA_MAX};
use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraId, CameraRig, Extrinsics, Quaternion};
use crate::raster::Raster;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadOptions {
    /// Reject unknown fields instead of warning.
    pub strict: bool,
}

impl LoadOptions {
    pub const STRICT: LoadOptions = LoadOptions { strict: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsEntry {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub u0: f64,
    pub v0: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default = "default_theta_max")]
    pub theta_max: f64,
}

fn default_theta_max() -> f64 {
    DEFAULT_THETA_MAX
}

impl From<&FisheyeIntrinsics> for IntrinsicsEntry {
    fn from(i: &FisheyeIntrinsics) -> Self {
        let [a1, a2, a3, a4] = i.coeffs();
        let (u0, v0) = i.principal_point();
        IntrinsicsEntry {
            a1,
            a2,
            a3,
            a4,
            u0,
            v0,
            width: i.width(),
            height: i.height(),
            theta_max: i.theta_max(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicsEntry {
    /// Vehicle-to-camera rotation `[w, x, y, z]`.
    pub quaternion: [f64; 4],
    /// Vehicle-to-camera translation.
    pub translation: [f64; 3],
    /// Camera centre in the vehicle frame. Written so that reloading is
    /// bit-exact; when present it must agree with `translation`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub id: CameraId,
    pub intrinsics: IntrinsicsEntry,
    pub extrinsics: ExtrinsicsEntry,
    /// Height held fixed during calibration; defaults to the camera-centre
    /// height implied by the extrinsics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_height: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub version: u32,
    pub cameras: Vec<CameraEntry>,
    pub adjacency: Vec<(CameraId, CameraId)>,
}

/// A rig together with the heights to hold fixed when calibrating it.
#[derive(Debug, Clone)]
pub struct RigDocument {
    pub rig: CameraRig,
    pub fixed_heights: FixedHeights,
}

impl RigDocument {
    /// Uses the rig's own camera heights.
    pub fn from_rig(rig: CameraRig) -> Self {
        let fixed_heights = rig_heights(&rig);
        RigDocument { rig, fixed_heights }
    }

    pub fn to_file(&self) -> RigFile {
        RigFile {
            version: FORMAT_VERSION,
            cameras: self
                .rig
                .cameras()
                .iter()
                .map(|c| CameraEntry {
                    id: c.id,
                    intrinsics: IntrinsicsEntry::from(&c.intrinsics),
                    extrinsics: ExtrinsicsEntry {
                        quaternion: c.extrinsics.q.to_array(),
                        translation: c.extrinsics.translation().into(),
                        center: Some(c.extrinsics.center().into()),
                    },
                    fixed_height: self.fixed_heights.get(&c.id).copied(),
                })
                .collect(),
            adjacency: self.rig.adjacency().to_vec(),
        }
    }
}

/// Allowed disagreement between a stored centre and translation.
const CENTER_TOLERANCE: f64 = 1e-9;

impl RigFile {
    /// Builds the rig. `path` only labels errors.
    pub fn to_document(&self, path: &Path) -> Result<RigDocument> {
        let schema = |json_path: String, e: Error| Error::Schema {
            path: path.to_path_buf(),
            json_path,
            message: e.to_string(),
        };
        let mut cameras = Vec::with_capacity(self.cameras.len());
        let mut fixed_heights = FixedHeights::new();
        for (k, c) in self.cameras.iter().enumerate() {
            let i = &c.intrinsics;
            let intrinsics = FisheyeIntrinsics::with_theta_max(
                [i.a1, i.a2, i.a3, i.a4],
                i.u0,
                i.v0,
                i.width,
                i.height,
                i.theta_max,
            )
            .map_err(|e| schema(format!("cameras[{k}].intrinsics"), e))?;
            let q = Quaternion::from_array(c.extrinsics.quaternion)
                .map_err(|e| schema(format!("cameras[{k}].extrinsics.quaternion"), e))?;
            let t = c.extrinsics.translation;
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    json_path: format!("cameras[{k}].extrinsics.translation"),
                    message: "non-finite translation".into(),
                });
            }
            let extrinsics = match c.extrinsics.center {
                None => Extrinsics::new(q, t.into()),
                Some(center) => {
                    let e = Extrinsics::from_center(q, center.into());
                    let gap = (e.translation() - Vector3::from(t)).amax();
                    if !(gap <= CENTER_TOLERANCE) {
                        return Err(Error::Schema {
                            path: path.to_path_buf(),
                            json_path: format!("cameras[{k}].extrinsics.center"),
                            message: format!("centre disagrees with translation by {gap:e} m"),
                        });
                    }
                    e
                }
            };
            let camera = Camera::new(c.id, intrinsics, extrinsics);
            let height = c.fixed_height.unwrap_or_else(|| camera.height());
            if !(height.is_finite() && height > 0.0) {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    json_path: format!("cameras[{k}].fixed_height"),
                    message: format!("height {height} must be positive"),
                });
            }
            fixed_heights.insert(c.id, height);
            cameras.push(camera);
        }
        let rig = CameraRig::new(cameras, self.adjacency.clone())
            .map_err(|e| schema("cameras".into(), e))?;
        Ok(RigDocument { rig, fixed_heights })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: String,
    /// Image path per camera, relative to the keypoint file's directory.
    #[serde(default)]
    pub images: BTreeMap<CameraId, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointEntry {
    /// Stable identifier; assigned on load when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub frame_id: String,
    pub cam_i: CameraId,
    pub cam_j: CameraId,
    pub pixel_i: PixelPoint,
    pub pixel_j: PixelPoint,
    /// Display colour of the overlap zone; not used by the solver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_tag: Option<String>,
}

impl KeypointEntry {
    pub fn from_pair(id: u64, kp: &KeypointPair) -> Self {
        let (a, b) = kp.zone();
        KeypointEntry {
            id: Some(id),
            frame_id: kp.frame_id.clone(),
            cam_i: kp.cam_i,
            cam_j: kp.cam_j,
            pixel_i: kp.pixel_i,
            pixel_j: kp.pixel_j,
            color_tag: Some(format!("{a}-{b}")),
        }
    }

    pub fn pair(&self) -> KeypointPair {
        KeypointPair::new(
            self.frame_id.clone(),
            self.cam_i,
            self.cam_j,
            self.pixel_i,
            self.pixel_j,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub version: u32,
    #[serde(default)]
    pub frames: Vec<FrameEntry>,
    #[serde(default)]
    pub keypoints: Vec<KeypointEntry>,
}

impl Default for KeypointFile {
    fn default() -> Self {
        KeypointFile {
            version: FORMAT_VERSION,
            frames: Vec::new(),
            keypoints: Vec::new(),
        }
    }
}

impl KeypointFile {
    /// File holding `pairs` with ids `0..n`, and a frame entry (without
    /// images) for every referenced frame.
    pub fn from_pairs(pairs: &[KeypointPair]) -> Self {
        let mut frames: Vec<FrameEntry> = Vec::new();
        for kp in pairs {
            if !frames.iter().any(|f| f.frame_id == kp.frame_id) {
                frames.push(FrameEntry {
                    frame_id: kp.frame_id.clone(),
                    images: BTreeMap::new(),
                });
            }
        }
        KeypointFile {
            version: FORMAT_VERSION,
            frames,
            keypoints: pairs
                .iter()
                .enumerate()
                .map(|(k, kp)| KeypointEntry::from_pair(k as u64, kp))
                .collect(),
        }
    }

    pub fn pairs(&self) -> Vec<KeypointPair> {
        self.keypoints.iter().map(KeypointEntry::pair).collect()
    }

    pub fn next_id(&self) -> u64 {
        self.keypoints
            .iter()
            .filter_map(|k| k.id)
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn frame(&self, frame_id: &str) -> Option<&FrameEntry> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    /// Checks that referenced frames exist and ids are unique, then fills in
    /// missing ids.
    fn normalize(&mut self, path: &Path) -> Result<()> {
        let schema = |json_path: String, message: String| Error::Schema {
            path: path.to_path_buf(),
            json_path,
            message,
        };
        for (k, f) in self.frames.iter().enumerate() {
            if self.frames[..k].iter().any(|g| g.frame_id == f.frame_id) {
                return Err(schema(
                    format!("frames[{k}].frame_id"),
                    format!("duplicate frame `{}`", f.frame_id),
                ));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (k, kp) in self.keypoints.iter().enumerate() {
            if self.frame(&kp.frame_id).is_none() {
                return Err(schema(
                    format!("keypoints[{k}].frame_id"),
                    format!("unknown frame `{}`", kp.frame_id),
                ));
            }
            if let Some(id) = kp.id {
                if !seen.insert(id) {
                    return Err(schema(format!("keypoints[{k}].id"), format!("duplicate id {id}")));
                }
            }
        }
        let mut next = self.next_id();
        for kp in &mut self.keypoints {
            if kp.id.is_none() {
                kp.id = Some(next);
                next += 1;
            }
        }
        Ok(())
    }

    /// Validates every keypoint against a rig: adjacency and pixel bounds.
    pub fn validate(&self, rig: &CameraRig, path: &Path) -> Result<()> {
        for (k, kp) in self.keypoints.iter().enumerate() {
            kp.pair().validate(rig).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                json_path: format!("keypoints[{k}]"),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a versioned JSON document, reporting the JSON path of schema
/// violations and handling unknown fields per `opts`.
fn parse_document<T: DeserializeOwned>(text: &str, path: &Path, opts: LoadOptions) -> Result<T> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        json_path: ".".into(),
        message: e.to_string(),
    })?;
    match value.get("version") {
        Some(Value::Number(n)) if n.as_u64() == Some(u64::from(FORMAT_VERSION)) => {}
        Some(Value::Number(n)) => {
            return Err(Error::Version {
                path: path.to_path_buf(),
                version: n.as_u64().and_then(|v| u32::try_from(v).ok()).unwrap_or(u32::MAX),
            })
        }
        _ => {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                json_path: "version".into(),
                message: "missing or non-integer version".into(),
            })
        }
    }
    let mut unknown = Vec::new();
    let mut record = |p: serde_ignored::Path<'_>| unknown.push(p.to_string());
    let de = serde_ignored::Deserializer::new(&value, &mut record);
    let parsed: T = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        json_path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if let Some(first) = unknown.first() {
        if opts.strict {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                json_path: first.clone(),
                message: "unknown field".into(),
            });
        }
        for field in &unknown {
            log::warn!("{}: ignoring unknown field `{field}`", path.display());
        }
    }
    Ok(parsed)
}

pub fn parse_rig(text: &str, path: &Path, opts: LoadOptions) -> Result<RigDocument> {
    parse_document::<RigFile>(text, path, opts)?.to_document(path)
}

pub fn load_rig(path: &Path, opts: LoadOptions) -> Result<RigDocument> {
    parse_rig(&read(path)?, path, opts)
}

pub fn save_rig(path: &Path, doc: &RigDocument) -> Result<()> {
    save_json(path, &doc.to_file())
}

pub fn parse_keypoints(text: &str, path: &Path, opts: LoadOptions) -> Result<KeypointFile> {
    let mut file: KeypointFile = parse_document(text, path, opts)?;
    file.normalize(path)?;
    Ok(file)
}

pub fn load_keypoints(path: &Path, opts: LoadOptions) -> Result<KeypointFile> {
    parse_keypoints(&read(path)?, path, opts)
}

pub fn save_keypoints(path: &Path, file: &KeypointFile) -> Result<()> {
    save_json(path, file)
}

/// Pretty-printed JSON, written to a sibling temporary file and renamed into
/// place.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable document");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Loads an 8- or 16-bit image as a `[0, 1]` raster: gray sources give one
/// channel, colour sources three (alpha is dropped).
pub fn load_image(path: &Path) -> Result<Raster> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let data = img.to_rgb32f().into_raw().into_iter().map(f64::from).collect();
        Raster::from_vec(w, h, 3, data)
    } else {
        let data = img.to_luma32f().into_raw().into_iter().map(f64::from).collect();
        Raster::from_vec(w, h, 1, data)
    }
}

/// Writes an 8-bit PNG.
/// 8-bit PNG bytes of a raster with values clamped to `[0, 1]`.
pub fn encode_png(raster: &Raster) -> std::result::Result<Vec<u8>, image::ImageError> {
    let mut bytes = Vec::new();
    raster
        .to_dynamic_image()
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

pub fn save_png(path: &Path, raster: &Raster) -> Result<()> {
    let bytes = encode_png(raster).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_atomic(path, &bytes)
}

/// Extensions tried, in order, when looking up `<camera>.<ext>` in a frame directory.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn find_frame_image(dir: &Path, id: CameraId) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads `<camera>.png|jpg|jpeg` for every camera of the rig from `dir`.
pub fn load_frame_dir(dir: &Path, rig: &CameraRig) -> Result<BTreeMap<CameraId, Raster>> {
    let mut images = BTreeMap::new();
    for cam in rig.cameras() {
        let path = find_frame_image(dir, cam.id).ok_or_else(|| {
            Error::io(
                dir.join(format!("{}.png", cam.id)),
                std::io::Error::new(std::io::ErrorKind::NotFound, "no image for camera"),
            )
        })?;
        images.insert(cam.id, load_image(&path)?);
    }
    Ok(images)
}

/// Encodes a raster as a little-endian float64 `.npy` array of shape
/// `(height, width)` or `(height, width, 3)`. Masked-out pixels become NaN.
pub fn encode_npy(raster: &Raster, mask: Option<&[bool]>) -> Vec<u8> {
    let shape = if raster.channels() == 1 {
        format!("({}, {})", raster.height(), raster.width())
    } else {
        format!("({}, {}, {})", raster.height(), raster.width(), raster.channels())
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    // Magic (6) + version (2) + length (2) + header + newline, padded to 64.
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + raster.data().len() * 8);
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let c = raster.channels();
    for (k, v) in raster.data().iter().enumerate() {
        let valid = mask.is_none_or(|m| m[k / c]);
        let v = if valid { *v } else { f64::NAN };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_npy(path: &Path, raster: &Raster, mask: Option<&[bool]>) -> Result<()> {
    write_atomic(path, &encode_npy(raster, mask))
}

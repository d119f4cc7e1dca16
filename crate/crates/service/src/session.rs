//! On-disk session state: the rig, clicked keypoints, frame images and the
//! latest optimized rig, with a revision counter bumped on every mutation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use svcalib::geometry::CameraId;
use svcalib::io::{self, FrameEntry, KeypointFile, LoadOptions, RigDocument};
use svcalib::{Error, Result};

pub const RIG_FILE: &str = "rig.json";
pub const KEYPOINT_FILE: &str = "keypoints.json";
pub const EVAL_KEYPOINT_FILE: &str = "eval_keypoints.json";
pub const OPTIMIZED_RIG_FILE: &str = "rig_optimized.json";
pub const SESSION_FILE: &str = "session.json";
pub const FRAMES_DIR: &str = "frames";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionMeta {
    session_id: String,
    revision: u64,
    /// High-water mark so ids of deleted keypoints are not handed out again.
    #[serde(default)]
    next_keypoint_id: u64,
}

#[derive(Debug, Clone)]
pub struct State {
    pub revision: u64,
    pub next_keypoint_id: u64,
    pub rig: RigDocument,
    pub optimized: Option<RigDocument>,
    pub keypoints: KeypointFile,
    /// Held-out keypoints for MDE, if the session ships them.
    pub eval: Option<KeypointFile>,
}

#[derive(Debug)]
pub struct Session {
    dir: PathBuf,
    id: String,
    state: RwLock<State>,
    busy: AtomicBool,
}

/// Clears the busy flag when dropped.
pub struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl Session {
    /// Opens the session in `dir`. Requires `rig.json`; creates the keypoint
    /// file when missing and registers any `frames/<frame>/<camera>.<ext>`
    /// images not yet listed in it.
    pub fn open(dir: &Path) -> Result<Session> {
        let dir = dir.to_path_buf();
        let rig = io::load_rig(&dir.join(RIG_FILE), LoadOptions::default())?;

        let kp_path = dir.join(KEYPOINT_FILE);
        let mut keypoints = if kp_path.exists() {
            io::load_keypoints(&kp_path, LoadOptions::default())?
        } else {
            KeypointFile::default()
        };
        keypoints.validate(&rig.rig, &kp_path)?;
        let discovered = discover_frames(&dir)?;
        let changed = merge_frames(&mut keypoints, discovered);
        if changed || !kp_path.exists() {
            io::save_keypoints(&kp_path, &keypoints)?;
        }

        let eval_path = dir.join(EVAL_KEYPOINT_FILE);
        let eval = if eval_path.exists() {
            let file = io::load_keypoints(&eval_path, LoadOptions::default())?;
            file.validate(&rig.rig, &eval_path)?;
            Some(file)
        } else {
            None
        };

        let opt_path = dir.join(OPTIMIZED_RIG_FILE);
        let optimized = if opt_path.exists() {
            Some(io::load_rig(&opt_path, LoadOptions::default())?)
        } else {
            None
        };

        let meta_path = dir.join(SESSION_FILE);
        let meta = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| io_error(&meta_path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Schema {
                path: meta_path.clone(),
                json_path: ".".into(),
                message: e.to_string(),
            })?
        } else {
            let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
            let meta = SessionMeta {
                session_id: format!("{nanos:x}"),
                revision: 0,
                next_keypoint_id: 0,
            };
            io::save_json(&meta_path, &meta)?;
            meta
        };
        log::info!(
            "session {} in {}: {} keypoints, {} frames, revision {}",
            meta.session_id,
            dir.display(),
            keypoints.keypoints.len(),
            keypoints.frames.len(),
            meta.revision
        );

        Ok(Session {
            dir,
            id: meta.session_id,
            state: RwLock::new(State {
                revision: meta.revision,
                next_keypoint_id: meta.next_keypoint_id.max(keypoints.next_id()),
                rig,
                optimized,
                keypoints,
                eval,
            }),
            busy: AtomicBool::new(false),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn read(&self) -> RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, State> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Claims the single solver slot, or `None` if a solve is running.
    pub fn try_busy(&self) -> Option<BusyGuard<'_>> {
        self.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| BusyGuard(&self.busy))
    }

    /// Path of a frame image as listed in the keypoint file.
    pub fn image_path(&self, state: &State, frame_id: &str, cam: CameraId) -> Option<PathBuf> {
        let rel = state.keypoints.frame(frame_id)?.images.get(&cam)?;
        Some(self.dir.join(rel))
    }

    /// Writes new keypoints, then the bumped revision. Leaves `state`
    /// untouched if the keypoint write fails.
    pub fn commit_keypoints(&self, state: &mut State, keypoints: KeypointFile) -> Result<u64> {
        io::save_keypoints(&self.dir.join(KEYPOINT_FILE), &keypoints)?;
        state.next_keypoint_id = state.next_keypoint_id.max(keypoints.next_id());
        state.keypoints = keypoints;
        self.bump(state)
    }

    pub fn commit_optimized(&self, state: &mut State, optimized: RigDocument) -> Result<u64> {
        io::save_rig(&self.dir.join(OPTIMIZED_RIG_FILE), &optimized)?;
        state.optimized = Some(optimized);
        self.bump(state)
    }

    fn bump(&self, state: &mut State) -> Result<u64> {
        state.revision += 1;
        io::save_json(
            &self.dir.join(SESSION_FILE),
            &SessionMeta {
                session_id: self.id.clone(),
                revision: state.revision,
                next_keypoint_id: state.next_keypoint_id,
            },
        )?;
        Ok(state.revision)
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Frames found under `frames/`, with image paths relative to the session.
fn discover_frames(dir: &Path) -> Result<Vec<FrameEntry>> {
    let root = dir.join(FRAMES_DIR);
    if !root.is_dir() {
        return Ok(Vec::new());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(&root).map_err(|e| io_error(&root, e))? {
        let entry = entry.map_err(|e| io_error(&root, e))?;
        if entry.path().is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names
        .into_iter()
        .map(|frame_id| {
            let frame_dir = root.join(&frame_id);
            let images: BTreeMap<CameraId, PathBuf> = CameraId::ALL
                .iter()
                .filter_map(|&id| {
                    let path = io::find_frame_image(&frame_dir, id)?;
                    Some((id, path.strip_prefix(dir).map(Path::to_path_buf).unwrap_or(path)))
                })
                .collect();
            FrameEntry { frame_id, images }
        })
        .collect())
}

/// Adds unknown frames and fills in missing image paths. Returns whether
/// anything changed.
fn merge_frames(file: &mut KeypointFile, discovered: Vec<FrameEntry>) -> bool {
    let mut changed = false;
    for found in discovered {
        match file.frames.iter_mut().find(|f| f.frame_id == found.frame_id) {
            Some(existing) => {
                for (cam, path) in found.images {
                    if let std::collections::btree_map::Entry::Vacant(v) = existing.images.entry(cam) {
                        v.insert(path);
                        changed = true;
                    }
                }
            }
            None => {
                file.frames.push(found);
                changed = true;
            }
        }
    }
    changed
}

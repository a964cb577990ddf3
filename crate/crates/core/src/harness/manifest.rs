//! JSON frame manifest: calibration plus per-frame file references.
//!
//! Poses are `world_from_body` in the LiDAR frame (x forward, y left, z up).
//! Relative file paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, PoseRecord, PoseSE3};
use crate::retrieval::FrameId;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub cam_from_lidar: PoseRecord,
}

impl Calibration {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, ManifestError> {
        let extrinsic = self
            .cam_from_lidar
            .to_pose()
            .map_err(|e| ManifestError::Invalid(format!("cam_from_lidar: {e}")))?;
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, extrinsic)
            .map_err(|e| ManifestError::Invalid(e.to_string()))
    }

    pub fn from_intrinsics(intr: &CameraIntrinsics) -> Self {
        Self {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            cam_from_lidar: PoseRecord::from_pose(&intr.cam_from_lidar),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub id: FrameId,
    pub timestamp_s: f64,
    pub patch_file: PathBuf,
    pub scan_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub calibration: Calibration,
    pub frames: Vec<FrameEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn from_json_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let mut m: Manifest = serde_json::from_str(text)?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest is always serializable")
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        self.calibration.intrinsics()?;
        let mut seen = HashSet::new();
        for f in &self.frames {
            if !seen.insert(f.id) {
                return Err(ManifestError::Invalid(format!("duplicate frame id {}", f.id)));
            }
            if !f.timestamp_s.is_finite() {
                return Err(ManifestError::Invalid(format!("frame {}: non-finite timestamp", f.id)));
            }
            if let Some(p) = &f.pose {
                p.to_pose()
                    .map_err(|e| ManifestError::Invalid(format!("frame {}: {e}", f.id)))?;
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Ground-truth poses for frames that carry one.
    pub fn poses(&self) -> Vec<(FrameId, f64, PoseSE3)> {
        self.frames
            .iter()
            .filter_map(|f| {
                let pose = f.pose.as_ref()?.to_pose().ok()?;
                Some((f.id, f.timestamp_s, pose))
            })
            .collect()
    }
}

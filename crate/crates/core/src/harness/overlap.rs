//! Ground-truth co-visibility between two poses.
//!
//! Poses are `world_from_body` with the body x axis forward, y left and z up.
//! The score is an angular term times a positional term, both linear
//! falloffs clamped to `[0, 1]`, evaluated on the relative pose expressed in
//! the first frame. Because the displacement is expressed in frame a, swapping
//! the arguments rotates `(fwd, lat)` by the yaw difference; the score is
//! symmetric for pure translations, and for yaw offsets that are multiples of
//! 90° when `lat_max_m == fwd_max_m`, but not in general.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{se3_relative, PoseSE3};
use crate::retrieval::FrameId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OverlapError {
    #[error("invalid overlap parameters: {0}")]
    InvalidParams(&'static str),
    #[error("need at least two poses, got {0}")]
    TooFewPoses(usize),
    #[error("duplicate frame id {0}")]
    DuplicateId(FrameId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlapParams {
    pub fov_h_deg: f64,
    pub lat_max_m: f64,
    pub fwd_max_m: f64,
    pub tau_o: f64,
}

impl Default for OverlapParams {
    fn default() -> Self {
        Self {
            fov_h_deg: 90.0,
            lat_max_m: 10.0,
            fwd_max_m: 20.0,
            tau_o: 0.6,
        }
    }
}

impl OverlapParams {
    pub fn validate(&self) -> Result<(), OverlapError> {
        if !(self.fov_h_deg > 0.0) {
            return Err(OverlapError::InvalidParams("fov_h_deg must be positive"));
        }
        if !(self.lat_max_m > 0.0 && self.fwd_max_m > 0.0) {
            return Err(OverlapError::InvalidParams("displacement scales must be positive"));
        }
        if !(self.tau_o > 0.0 && self.tau_o < 1.0) {
            return Err(OverlapError::InvalidParams("tau_o must lie in (0, 1)"));
        }
        Ok(())
    }
}

fn falloff(x: f64, scale: f64) -> f64 {
    (1.0 - x.abs() / scale).clamp(0.0, 1.0)
}

/// Overlap score in `[0, 1]`.
pub fn compute_overlap(pose_a: &PoseSE3, pose_b: &PoseSE3, params: &OverlapParams) -> f64 {
    let delta = se3_relative(pose_a, pose_b);
    let t = delta.translation();
    let angular = falloff(delta.yaw_deg(), params.fov_h_deg);
    let positional = falloff(t.y, params.lat_max_m) * falloff(t.x, params.fwd_max_m);
    angular * positional
}

/// Boolean ground-truth match matrix addressed by frame id.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    ids: Vec<FrameId>,
    slot: HashMap<FrameId, usize>,
    data: Vec<bool>,
}

impl MatchMatrix {
    pub fn from_fn(ids: Vec<FrameId>, f: impl Fn(usize, usize) -> bool) -> Result<Self, OverlapError> {
        let mut slot = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if slot.insert(id, i).is_some() {
                return Err(OverlapError::DuplicateId(id));
            }
        }
        let n = ids.len();
        let data = (0..n * n).map(|k| f(k / n, k % n)).collect();
        Ok(Self { ids, slot, data })
    }

    pub fn ids(&self) -> &[FrameId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Entry by position.
    pub fn at(&self, i: usize, j: usize) -> bool {
        self.data[i * self.ids.len() + j]
    }

    /// Entry by frame id; `None` if either id is unknown.
    pub fn is_match(&self, query: FrameId, candidate: FrameId) -> Option<bool> {
        let i = *self.slot.get(&query)?;
        let j = *self.slot.get(&candidate)?;
        Some(self.at(i, j))
    }

    /// Ids matching `query`, excluding itself.
    pub fn matches_of(&self, query: FrameId) -> Vec<FrameId> {
        let Some(&i) = self.slot.get(&query) else {
            return Vec::new();
        };
        (0..self.ids.len())
            .filter(|&j| j != i && self.at(i, j))
            .map(|j| self.ids[j])
            .collect()
    }
}

/// Entry `(i, j)` is `compute_overlap(pose_i, pose_j) > tau_o`.
pub fn label_pairs(frames: &[(FrameId, PoseSE3)], params: &OverlapParams) -> Result<MatchMatrix, OverlapError> {
    params.validate()?;
    if frames.len() < 2 {
        return Err(OverlapError::TooFewPoses(frames.len()));
    }
    let ids = frames.iter().map(|f| f.0).collect();
    MatchMatrix::from_fn(ids, |i, j| compute_overlap(&frames[i].1, &frames[j].1, params) > params.tau_o)
}

//! Visual/LiDAR fusion and correspondence matching.
//!
//! Patches are lifted to 3D with LiDAR depth: scan points are moved into the
//! camera frame, projected, and bucketed by patch footprint. A patch with at
//! least one point takes the median depth of its points, is placed at the
//! unprojection of its center pixel at that depth, and borrows the LiDAR
//! descriptor of the projected point closest to its center. Visual and
//! LiDAR blocks are l2-normalized separately and concatenated, so the cosine
//! between two fused vectors is the mean of the per-modality cosines.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::hungarian_max;
use crate::geometry::{l2_normalize, CameraIntrinsics};

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.90;
pub const DEFAULT_LIDAR_DIM: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("scan has {points} points but {descriptors} descriptors")]
    DescriptorCount { points: usize, descriptors: usize },
    #[error("scan is empty")]
    EmptyScan,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("patch grid {rows}x{cols} does not match {patches} patches")]
    GridMismatch { rows: usize, cols: usize, patches: usize },
    #[error("no scan point projects into the image")]
    EmptyProjection,
    #[error("descriptor block has zero norm")]
    ZeroNorm,
    #[error("point set is empty")]
    EmptySet,
    #[error("fused descriptor dims differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// LiDAR points (meters, LiDAR frame) with one descriptor row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    points: Vec<Vector3<f64>>,
    descriptors: DMatrix<f64>,
}

impl LidarScan {
    pub fn new(points: Vec<Vector3<f64>>, descriptors: DMatrix<f64>) -> Result<Self, FusionError> {
        if points.is_empty() {
            return Err(FusionError::EmptyScan);
        }
        if descriptors.nrows() != points.len() {
            return Err(FusionError::DescriptorCount {
                points: points.len(),
                descriptors: descriptors.nrows(),
            });
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(FusionError::NonFinite("scan points"));
        }
        Ok(Self { points, descriptors })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn descriptors(&self) -> &DMatrix<f64> {
        &self.descriptors
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.ncols()
    }
}

/// Patch layout of the image, row-major patch order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for PatchGrid {
    /// 16×16 patches of 14 px on a 224×224 image.
    fn default() -> Self {
        Self { rows: 16, cols: 16 }
    }
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_size(&self, intr: &CameraIntrinsics) -> (f64, f64) {
        (intr.width as f64 / self.cols as f64, intr.height as f64 / self.rows as f64)
    }

    /// Patch index containing pixel `(u, v)`; `None` outside the image.
    pub fn patch_of(&self, u: f64, v: f64, intr: &CameraIntrinsics) -> Option<usize> {
        let (pw, ph) = self.patch_size(intr);
        let c = (u / pw).floor();
        let r = (v / ph).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some(r as usize * self.cols + c as usize)
    }

    pub fn center(&self, patch: usize, intr: &CameraIntrinsics) -> (f64, f64) {
        let (pw, ph) = self.patch_size(intr);
        let r = (patch / self.cols) as f64;
        let c = (patch % self.cols) as f64;
        ((c + 0.5) * pw, (r + 0.5) * ph)
    }
}

/// Lifted patches: camera-frame points with block-unit fused descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPointSet {
    points: Vec<Vector3<f64>>,
    fused: DMatrix<f64>,
    visual_dim: usize,
    patch_ids: Vec<usize>,
}

impl FusedPointSet {
    /// Rows of `fused` must each be `[unit visual ‖ unit lidar]`.
    pub fn new(
        points: Vec<Vector3<f64>>,
        fused: DMatrix<f64>,
        visual_dim: usize,
        patch_ids: Vec<usize>,
    ) -> Result<Self, FusionError> {
        if fused.nrows() != points.len() || patch_ids.len() != points.len() {
            return Err(FusionError::DescriptorCount {
                points: points.len(),
                descriptors: fused.nrows(),
            });
        }
        Ok(Self {
            points,
            fused,
            visual_dim,
            patch_ids,
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn fused(&self) -> &DMatrix<f64> {
        &self.fused
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn patch_ids(&self) -> &[usize] {
        &self.patch_ids
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `[l2(visual) ‖ l2(lidar)]`; fails if either block has zero norm.
pub fn fuse_descriptors(visual: &[f64], lidar: &[f64]) -> Result<Vec<f64>, FusionError> {
    let v = l2_normalize(visual);
    let l = l2_normalize(lidar);
    if v.zero_norm || l.zero_norm {
        return Err(FusionError::ZeroNorm);
    }
    let mut out = v.values;
    out.extend(l.values);
    Ok(out)
}

/// Cosine between two block-unit fused vectors (each has norm √2).
pub fn fused_cosine(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / 2.0).clamp(-1.0, 1.0)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Lifts patch embeddings (`P × d_in`, row-major patch order) into 3D.
pub fn lift_patches(
    patch_feats: &DMatrix<f64>,
    scan: &LidarScan,
    intr: &CameraIntrinsics,
    grid: PatchGrid,
) -> Result<FusedPointSet, FusionError> {
    if patch_feats.nrows() != grid.len() {
        return Err(FusionError::GridMismatch {
            rows: grid.rows,
            cols: grid.cols,
            patches: patch_feats.nrows(),
        });
    }
    struct Bucket {
        depths: Vec<f64>,
        nearest: usize,
        nearest_d2: f64,
    }
    let mut buckets: Vec<Option<Bucket>> = (0..grid.len()).map(|_| None).collect();
    let mut any = false;
    for (idx, p) in scan.points().iter().enumerate() {
        let pc = intr.cam_from_lidar.transform_point(p);
        let Ok(px) = intr.project(&pc) else { continue };
        let Some(patch) = grid.patch_of(px.u, px.v, intr) else { continue };
        any = true;
        let (cu, cv) = grid.center(patch, intr);
        let d2 = (px.u - cu).powi(2) + (px.v - cv).powi(2);
        match &mut buckets[patch] {
            Some(b) => {
                b.depths.push(px.depth);
                if d2 < b.nearest_d2 {
                    b.nearest = idx;
                    b.nearest_d2 = d2;
                }
            }
            slot @ None => {
                *slot = Some(Bucket {
                    depths: vec![px.depth],
                    nearest: idx,
                    nearest_d2: d2,
                })
            }
        }
    }
    if !any {
        return Err(FusionError::EmptyProjection);
    }

    let visual_dim = patch_feats.ncols();
    let mut points = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut patch_ids = Vec::new();
    for (patch, bucket) in buckets.iter_mut().enumerate() {
        let Some(b) = bucket else { continue };
        let visual: Vec<f64> = patch_feats.row(patch).iter().copied().collect();
        let lidar: Vec<f64> = scan.descriptors().row(b.nearest).iter().copied().collect();
        let Ok(fused) = fuse_descriptors(&visual, &lidar) else {
            continue;
        };
        let depth = median(&mut b.depths);
        let (cu, cv) = grid.center(patch, intr);
        points.push(intr.unproject(cu, cv, depth));
        rows.extend(fused);
        patch_ids.push(patch);
    }
    let width = visual_dim + scan.descriptor_dim();
    let fused = DMatrix::from_row_slice(points.len(), width, &rows);
    FusedPointSet::new(points, fused, visual_dim, patch_ids)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub query_idx: usize,
    pub candidate_idx: usize,
    pub similarity: f64,
}

/// One-to-one correspondences, every similarity at or above the threshold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(source, destination)` point pairs for registration.
    pub fn point_pairs(&self, query: &FusedPointSet, candidate: &FusedPointSet) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        self.pairs
            .iter()
            .map(|c| (query.points()[c.query_idx], candidate.points()[c.candidate_idx]))
            .collect()
    }
}

/// When the similarity threshold is applied relative to the assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Solve the assignment on raw similarities, then drop weak pairs.
    #[default]
    After,
    /// Replace sub-threshold similarities with the −1 sentinel first.
    Before,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_MATCH_THRESHOLD,
            threshold_mode: ThresholdMode::After,
        }
    }
}

/// Pairwise fused cosine similarities, `|a| × |b|`.
pub fn similarity_matrix(a: &FusedPointSet, b: &FusedPointSet) -> Result<DMatrix<f64>, FusionError> {
    if a.fused().ncols() != b.fused().ncols() {
        return Err(FusionError::DimensionMismatch(a.fused().ncols(), b.fused().ncols()));
    }
    Ok((a.fused() * b.fused().transpose()).map(|v| (v / 2.0).clamp(-1.0, 1.0)))
}

/// Maximum-similarity one-to-one assignment, thresholded after solving.
pub fn match_correspondences(
    a: &FusedPointSet,
    b: &FusedPointSet,
    threshold: f64,
) -> Result<CorrespondenceSet, FusionError> {
    match_correspondences_with(
        a,
        b,
        MatchConfig {
            threshold,
            threshold_mode: ThresholdMode::After,
        },
    )
}

pub fn match_correspondences_with(
    a: &FusedPointSet,
    b: &FusedPointSet,
    cfg: MatchConfig,
) -> Result<CorrespondenceSet, FusionError> {
    if a.is_empty() || b.is_empty() {
        return Err(FusionError::EmptySet);
    }
    let sim = similarity_matrix(a, b)?;
    let solved = match cfg.threshold_mode {
        ThresholdMode::After => hungarian_max(&sim),
        ThresholdMode::Before => hungarian_max(&sim.map(|v| if v < cfg.threshold { -1.0 } else { v })),
    };
    let pairs = solved
        .into_iter()
        .filter(|&(i, j)| sim[(i, j)] >= cfg.threshold)
        .map(|(i, j)| Correspondence {
            query_idx: i,
            candidate_idx: j,
            similarity: sim[(i, j)],
        })
        .collect();
    Ok(CorrespondenceSet { pairs })
}

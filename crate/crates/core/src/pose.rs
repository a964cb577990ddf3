//! Rigid 6-DoF estimation from 3D-3D correspondences.
//!
//! [`kabsch`] is the closed-form least-squares fit, [`ransac_register`]
//! wraps it in hypothesize-and-verify over minimal samples, and
//! [`icp_refine`] offers optional point-to-point refinement.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{se3_relative, PoseSE3};
use crate::retrieval::{FrameId, Shortlist};

pub type PointPair = (Vector3<f64>, Vector3<f64>);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("source and destination sizes differ ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("points are collinear or coincident")]
    Degenerate,
    #[error("invalid RANSAC config: {0}")]
    InvalidConfig(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no registration result for candidate {0}")]
    MissingResult(FrameId),
}

/// Relative size of the second scatter eigenvalue below which a point set
/// counts as collinear.
const COLLINEAR_RATIO: f64 = 1e-10;

fn centroid(points: impl Iterator<Item = Vector3<f64>>) -> (Vector3<f64>, usize) {
    let mut sum = Vector3::zeros();
    let mut n = 0;
    for p in points {
        sum += p;
        n += 1;
    }
    (sum / n.max(1) as f64, n)
}

fn is_degenerate(points: &[Vector3<f64>], c: &Vector3<f64>) -> bool {
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - c;
        scatter += d * d.transpose();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(scatter).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let scale = ev[0].max(0.0);
    scale <= f64::MIN_POSITIVE || ev[1] <= COLLINEAR_RATIO * scale
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`, with
/// reflection correction so the rotation always has det +1.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<PoseSE3, PoseError> {
    if src.len() != dst.len() {
        return Err(PoseError::SizeMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(PoseError::TooFewCorrespondences {
            needed: 3,
            got: src.len(),
        });
    }
    let (cs, _) = centroid(src.iter().copied());
    let (cd, _) = centroid(dst.iter().copied());
    if is_degenerate(src, &cs) || is_degenerate(dst, &cd) {
        return Err(PoseError::Degenerate);
    }
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(PoseError::Degenerate);
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * correction * u.transpose();
    let t = cd - r * cs;
    Ok(PoseSE3::from_parts(r, t))
}

fn kabsch_pairs(pairs: &[PointPair]) -> Result<PoseSE3, PoseError> {
    let (src, dst): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
    kabsch(&src, &dst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    /// Inlier residual bound, meters.
    pub distance_threshold: f64,
    pub sample_size: usize,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            distance_threshold: 0.05,
            sample_size: 3,
            max_iterations: 100_000,
            confidence: 0.999,
            min_inliers: 3,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PoseError> {
        if self.sample_size < 3 {
            return Err(PoseError::InvalidConfig("sample_size must be at least 3".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PoseError::InvalidConfig("confidence must lie in (0, 1)".into()));
        }
        if !(self.distance_threshold > 0.0) {
            return Err(PoseError::InvalidConfig("distance_threshold must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(PoseError::InvalidConfig("max_iterations must be positive".into()));
        }
        Ok(())
    }

    /// Iterations needed to draw an all-inlier sample with `confidence`, given
    /// inlier ratio `w`, capped at `max_iterations`.
    pub fn adaptive_bound(&self, w: f64) -> usize {
        if w >= 1.0 {
            return 1;
        }
        let p_good = w.powi(self.sample_size as i32);
        if p_good <= 0.0 {
            return self.max_iterations;
        }
        let n = (1.0 - self.confidence).ln() / (1.0 - p_good).ln();
        if !n.is_finite() || n >= self.max_iterations as f64 {
            self.max_iterations
        } else {
            (n.ceil() as usize).max(1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: PoseSE3,
    pub inlier_indices: Vec<usize>,
    /// Meters; 0 when there are no inliers.
    pub inlier_rmse: f64,
    pub valid: bool,
    pub iterations_run: usize,
}

impl RegistrationResult {
    pub fn invalid(iterations_run: usize) -> Self {
        Self {
            transform: PoseSE3::identity(),
            inlier_indices: Vec::new(),
            inlier_rmse: 0.0,
            valid: false,
            iterations_run,
        }
    }

    pub fn inlier_count(&self) -> usize {
        self.inlier_indices.len()
    }
}

fn score(pairs: &[PointPair], t: &PoseSE3, threshold: f64) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut sq = 0.0;
    for (i, (s, d)) in pairs.iter().enumerate() {
        let r = (t.transform_point(s) - d).norm();
        if r <= threshold {
            inliers.push(i);
            sq += r * r;
        }
    }
    let rmse = if inliers.is_empty() {
        0.0
    } else {
        (sq / inliers.len() as f64).sqrt()
    };
    (inliers, rmse)
}

fn better(count: usize, rmse: f64, best: &Option<(PoseSE3, Vec<usize>, f64)>) -> bool {
    match best {
        None => count > 0,
        Some((_, b, brmse)) => count > b.len() || (count == b.len() && rmse < *brmse),
    }
}

/// RANSAC over minimal samples with adaptive termination, followed by a
/// least-squares refit on the consensus set.
///
/// Hypotheses are ranked by inlier count, ties by lower inlier RMSE. The
/// returned inliers are always those of the returned transform, so every
/// reported inlier satisfies the residual bound.
pub fn ransac_register(pairs: &[PointPair], cfg: &RansacConfig) -> Result<RegistrationResult, PoseError> {
    cfg.validate()?;
    let n = pairs.len();
    if n < cfg.sample_size {
        return Err(PoseError::TooFewCorrespondences {
            needed: cfg.sample_size,
            got: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(PoseSE3, Vec<usize>, f64)> = None;
    let mut needed = cfg.max_iterations;
    let mut iterations = 0;
    let mut subset = Vec::with_capacity(cfg.sample_size);
    while iterations < needed {
        iterations += 1;
        subset.clear();
        subset.extend(sample(&mut rng, n, cfg.sample_size).iter().map(|i| pairs[i]));
        let Ok(hyp) = kabsch_pairs(&subset) else { continue };
        let (inliers, rmse) = score(pairs, &hyp, cfg.distance_threshold);
        if better(inliers.len(), rmse, &best) {
            needed = cfg.adaptive_bound(inliers.len() as f64 / n as f64).max(iterations);
            best = Some((hyp, inliers, rmse));
        }
    }

    let Some((mut transform, mut inliers, mut rmse)) = best else {
        return Ok(RegistrationResult::invalid(iterations));
    };
    if inliers.len() >= 3 {
        let consensus: Vec<PointPair> = inliers.iter().map(|&i| pairs[i]).collect();
        if let Ok(refit) = kabsch_pairs(&consensus) {
            let (ri, rr) = score(pairs, &refit, cfg.distance_threshold);
            if ri.len() >= inliers.len() {
                transform = refit;
                inliers = ri;
                rmse = rr;
            }
        }
    }
    let valid = inliers.len() >= cfg.min_inliers;
    if !valid {
        return Ok(RegistrationResult::invalid(iterations));
    }
    Ok(RegistrationResult {
        transform,
        inlier_indices: inliers,
        inlier_rmse: rmse,
        valid,
        iterations_run: iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: PoseSE3,
    /// Inlier RMSE at the initial pose and after every accepted update.
    pub rmse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// No destination point lies within `max_corr_dist` of any transformed
    /// source point at the initial pose.
    pub no_overlap: bool,
}

pub const ICP_CONVERGENCE: f64 = 1e-6;

fn nn_pairs(src: &[Vector3<f64>], dst: &[Vector3<f64>], t: &PoseSE3, max_dist: f64) -> (Vec<(usize, usize)>, f64) {
    let mut pairs = Vec::new();
    let mut sq = 0.0;
    let max_sq = max_dist * max_dist;
    for (i, s) in src.iter().enumerate() {
        let p = t.transform_point(s);
        let mut best = (usize::MAX, f64::INFINITY);
        for (j, d) in dst.iter().enumerate() {
            let dd = (p - d).norm_squared();
            if dd < best.1 {
                best = (j, dd);
            }
        }
        if best.1 <= max_sq {
            pairs.push((i, best.0));
            sq += best.1;
        }
    }
    let rmse = if pairs.is_empty() {
        0.0
    } else {
        (sq / pairs.len() as f64).sqrt()
    };
    (pairs, rmse)
}

/// Point-to-point ICP from `init`. An update is only accepted when it does
/// not increase the inlier RMSE, so `rmse_history` is non-increasing.
pub fn icp_refine(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    init: &PoseSE3,
    max_corr_dist: f64,
    max_iters: usize,
) -> Result<IcpResult, PoseError> {
    if src.is_empty() || dst.is_empty() {
        return Err(PoseError::EmptyCloud);
    }
    let (mut pairs, mut rmse) = nn_pairs(src, dst, init, max_corr_dist);
    let mut result = IcpResult {
        transform: *init,
        rmse_history: vec![rmse],
        iterations: 0,
        converged: false,
        no_overlap: pairs.is_empty(),
    };
    if result.no_overlap {
        result.rmse_history.clear();
        return Ok(result);
    }
    for it in 1..=max_iters {
        result.iterations = it;
        let s: Vec<_> = pairs.iter().map(|&(i, _)| src[i]).collect();
        let d: Vec<_> = pairs.iter().map(|&(_, j)| dst[j]).collect();
        let Ok(next) = kabsch(&s, &d) else { break };
        let (next_pairs, next_rmse) = nn_pairs(src, dst, &next, max_corr_dist);
        let change = next.max_abs_diff(&result.transform);
        if next_pairs.is_empty() || next_rmse > rmse {
            // a sub-tolerance step that only adds rounding noise still counts
            result.converged = change < ICP_CONVERGENCE;
            break;
        }
        result.transform = next;
        result.rmse_history.push(next_rmse);
        pairs = next_pairs;
        rmse = next_rmse;
        if change < ICP_CONVERGENCE {
            result.converged = true;
            break;
        }
    }
    Ok(result)
}

/// Yaw and planar translation error of `est` against `gt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseErrors {
    pub yaw_deg: f64,
    pub dx_m: f64,
    pub dy_m: f64,
}

pub fn pose_errors(est: &PoseSE3, gt: &PoseSE3) -> PoseErrors {
    let delta = se3_relative(gt, est);
    PoseErrors {
        yaw_deg: delta.yaw_deg().abs(),
        dx_m: delta.translation().x.abs(),
        dy_m: delta.translation().y.abs(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate {
    pub frame_id: FrameId,
    pub retrieval_score: f64,
    /// ‖translation‖ of the estimated relative pose, meters.
    pub pose_distance: f64,
    pub inliers: usize,
    pub transform: PoseSE3,
}

/// Ordering of verified candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankMode {
    /// Ascending estimated translation distance.
    #[default]
    Pose,
    /// Descending inlier count.
    Inliers,
}

fn verified(shortlist: &Shortlist, results: &HashMap<FrameId, RegistrationResult>) -> Result<Vec<RankedCandidate>, PoseError> {
    let mut out = Vec::new();
    for e in &shortlist.entries {
        let r = results.get(&e.frame_id).ok_or(PoseError::MissingResult(e.frame_id))?;
        if r.valid {
            out.push(RankedCandidate {
                frame_id: e.frame_id,
                retrieval_score: e.score,
                pose_distance: r.transform.translation().norm(),
                inliers: r.inlier_count(),
                transform: r.transform,
            });
        }
    }
    Ok(out)
}

/// Drops invalid registrations and sorts the rest by ascending pose
/// distance; ties go to the higher retrieval score, then the smaller id.
pub fn rerank_by_pose(
    shortlist: &Shortlist,
    results: &HashMap<FrameId, RegistrationResult>,
) -> Result<Vec<RankedCandidate>, PoseError> {
    let mut out = verified(shortlist, results)?;
    out.sort_by(|a, b| {
        a.pose_distance
            .total_cmp(&b.pose_distance)
            .then(b.retrieval_score.total_cmp(&a.retrieval_score))
            .then(a.frame_id.cmp(&b.frame_id))
    });
    Ok(out)
}

/// Alternative ordering by descending inlier count, ties by pose distance.
pub fn rerank_by_inliers(
    shortlist: &Shortlist,
    results: &HashMap<FrameId, RegistrationResult>,
) -> Result<Vec<RankedCandidate>, PoseError> {
    let mut out = verified(shortlist, results)?;
    out.sort_by(|a, b| {
        b.inliers
            .cmp(&a.inliers)
            .then(a.pose_distance.total_cmp(&b.pose_distance))
            .then(a.frame_id.cmp(&b.frame_id))
    });
    Ok(out)
}

pub fn rerank(
    mode: RerankMode,
    shortlist: &Shortlist,
    results: &HashMap<FrameId, RegistrationResult>,
) -> Result<Vec<RankedCandidate>, PoseError> {
    match mode {
        RerankMode::Pose => rerank_by_pose(shortlist, results),
        RerankMode::Inliers => rerank_by_inliers(shortlist, results),
    }
}

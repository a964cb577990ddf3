//! End-to-end loop-closure run over a manifest.
//!
//! Every loaded frame is both a database entry and a query. Per query:
//! global + refinement retrieval with a temporal exclusion window, patch
//! lifting and fused matching against each shortlisted candidate, RANSAC
//! registration, re-ranking, and acceptance of the best valid candidate.
//! Queries run in parallel; results are collected in frame order so the
//! output does not depend on scheduling.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use super::config::{Config, ConfigError};
use super::manifest::{Manifest, ManifestError};
use super::report::{evaluate, EvalReport, GroundTruthFrame, QueryRecord};
use crate::aggregation::{fit_cluster_bank, refine_descriptor, AggregationError, Aggregator, ClusterBank, GlobalDescriptor, RefinementDescriptor};
use crate::formats::{self, FormatError, PatchEmbeddings};
use crate::fusion::{lift_patches, match_correspondences_with, FusedPointSet, LidarScan};
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::harness::metrics::MetricError;
use crate::pose::{icp_refine, ransac_register, rerank, RansacConfig, RankedCandidate, RegistrationResult};
use crate::retrieval::{two_stage_retrieve, DescriptorIndex, FrameId, RefinementStore, RetrievalError, Shortlist};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("cluster bank: {0}")]
    Bank(#[from] FormatError),
    #[error("aggregation: {0}")]
    Aggregation(#[from] AggregationError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("evaluation: {0}")]
    Metric(#[from] MetricError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl PipelineError {
    /// Whether the failure stems from the user's inputs (manifest, config or
    /// referenced parameter files) rather than from processing.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Manifest(_) | Self::Bank(_))
    }
}

/// One frame with its inputs loaded.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub id: FrameId,
    pub timestamp_s: f64,
    pub pose: Option<PoseSE3>,
    pub embeddings: PatchEmbeddings,
    pub scan: LidarScan,
}

/// Loads every frame, in manifest order. Frames whose files are missing or
/// malformed are logged, reported and skipped.
pub fn load_frames(manifest: &Manifest) -> (Vec<FrameData>, Vec<(FrameId, String)>) {
    let loaded: Vec<Result<FrameData, (FrameId, String)>> = manifest
        .frames
        .par_iter()
        .map(|f| {
            let fail = |what: &str, e: FormatError| (f.id, format!("{what}: {e}"));
            let patch_path = manifest.resolve(&f.patch_file);
            let scan_path = manifest.resolve(&f.scan_file);
            let embeddings = formats::open(&patch_path)
                .and_then(|mut r| formats::read_patch_embeddings(&mut r))
                .map_err(|e| fail(&patch_path.display().to_string(), e))?;
            let scan = formats::open(&scan_path)
                .and_then(|mut r| formats::read_scan(&mut r))
                .map_err(|e| fail(&scan_path.display().to_string(), e))?;
            Ok(FrameData {
                id: f.id,
                timestamp_s: f.timestamp_s,
                pose: f.pose.as_ref().and_then(|p| p.to_pose().ok()),
                embeddings,
                scan,
            })
        })
        .collect();
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for r in loaded {
        match r {
            Ok(f) => frames.push(f),
            Err((id, msg)) => {
                warn!("skipping frame {id}: {msg}");
                skipped.push((id, msg));
            }
        }
    }
    (frames, skipped)
}

/// Stacks last-layer patches, taking an evenly strided subset when there are
/// more than `max_samples`.
fn fit_samples(frames: &[FrameData], max_samples: usize) -> DMatrix<f64> {
    let total: usize = frames.iter().map(|f| f.embeddings.last().nrows()).sum();
    let d = frames[0].embeddings.last().ncols();
    let stride = total.div_ceil(max_samples.max(1)).max(1);
    let mut rows = Vec::new();
    let mut n = 0;
    let mut k = 0usize;
    for f in frames {
        let m = f.embeddings.last();
        if m.ncols() != d {
            continue;
        }
        for r in 0..m.nrows() {
            if k.is_multiple_of(stride) {
                rows.extend(m.row(r).iter().copied());
                n += 1;
            }
            k += 1;
        }
    }
    DMatrix::from_row_slice(n, d, &rows)
}

/// Loads the configured cluster bank, or fits one on the frames.
pub fn build_aggregator(cfg: &Config, frames: &[FrameData]) -> Result<Aggregator, PipelineError> {
    let a = &cfg.aggregation;
    let bank = match &a.bank_file {
        Some(path) => formats::read_cluster_bank(&mut formats::open(path)?)?,
        None => {
            let samples = fit_samples(frames, a.fit_max_samples);
            fit_cluster_bank(&samples, a.clusters, a.proj_dim, a.fit_seed)?.with_dustbin_score(a.dustbin_score)
        }
    };
    Ok(aggregator_from(bank, cfg))
}

pub fn aggregator_from(bank: ClusterBank, cfg: &Config) -> Aggregator {
    let mut agg = Aggregator::new(bank);
    agg.iterations = cfg.aggregation.iterations;
    agg.temperature = cfg.aggregation.temperature;
    agg.dustbin = cfg.aggregation.dustbin_marginal;
    agg
}

/// Global descriptor from the last layer and refinement descriptor from the
/// last three layers.
pub fn describe(agg: &Aggregator, emb: &PatchEmbeddings) -> Result<(GlobalDescriptor, RefinementDescriptor), AggregationError> {
    let global = agg.global_descriptor(emb.last())?;
    let refinement = refine_descriptor(emb.last_n(3))?;
    Ok((global, refinement))
}

/// Global index and refinement store over described frames.
pub struct Database {
    pub index: DescriptorIndex,
    pub store: RefinementStore,
    pub descriptors: HashMap<FrameId, (GlobalDescriptor, RefinementDescriptor)>,
}

/// Describes every frame in parallel; frames that cannot be described are
/// skipped with a warning.
pub fn build_database(
    cfg: &Config,
    agg: &Aggregator,
    frames: &[FrameData],
    skipped: &mut Vec<(FrameId, String)>,
) -> Result<Database, PipelineError> {
    let described: Vec<_> = frames
        .par_iter()
        .map(|f| (f.id, describe(agg, &f.embeddings)))
        .collect();
    let mut index = DescriptorIndex::new(cfg.retrieval.index_mode());
    let mut store = RefinementStore::new();
    let mut descriptors = HashMap::new();
    for (id, d) in described {
        match d {
            Ok((g, r)) => {
                index.add(id, &g)?;
                store.insert(id, r.clone())?;
                descriptors.insert(id, (g, r));
            }
            Err(e) => {
                warn!("skipping frame {id}: {e}");
                skipped.push((id, e.to_string()));
            }
        }
    }
    if !index.is_empty() && matches!(index.mode(), crate::retrieval::IndexMode::InvertedFile { .. }) {
        index.train_lists(cfg.pipeline.seed)?;
    }
    Ok(Database {
        index,
        store,
        descriptors,
    })
}

/// Per-query wall clock, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub retrieval_ms: f64,
    pub matching_ms: f64,
    pub registration_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopClosure {
    pub query_id: FrameId,
    pub candidate_id: FrameId,
    /// `query_from_candidate` in the body (LiDAR) frame.
    pub transform: PoseSE3,
    pub inliers: usize,
    pub retrieval_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query_id: FrameId,
    pub timestamp_s: f64,
    pub shortlist: Shortlist,
    pub ranked: Vec<RankedCandidate>,
    pub closure: Option<LoopClosure>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub outcomes: Vec<QueryOutcome>,
    pub skipped: Vec<(FrameId, String)>,
    /// Present when at least one frame carries a ground-truth pose.
    pub report: Option<EvalReport>,
    pub frames: Vec<(FrameId, f64)>,
}

impl PipelineOutput {
    pub fn closures(&self) -> impl Iterator<Item = &LoopClosure> {
        self.outcomes.iter().filter_map(|o| o.closure.as_ref())
    }

    pub fn records(&self) -> Vec<QueryRecord> {
        self.outcomes.iter().map(QueryOutcome::record).collect()
    }
}

impl QueryOutcome {
    pub fn record(&self) -> QueryRecord {
        QueryRecord {
            query_id: self.query_id,
            shortlist: self.shortlist.clone(),
            closure: self.closure.as_ref().map(|c| (c.candidate_id, c.transform)),
            total_ms: self.timings.total_ms,
        }
    }
}

/// Deterministic per-pair RANSAC seed.
fn pair_seed(seed: u64, query: FrameId, candidate: FrameId) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ query.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ candidate.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Registers `candidate` onto `query`, returning `query_cam_from_candidate_cam`.
fn register_pair(
    cfg: &Config,
    query: &FusedPointSet,
    candidate: &FusedPointSet,
    seed: u64,
) -> (RegistrationResult, f64, f64) {
    let t0 = Instant::now();
    let matches = match match_correspondences_with(query, candidate, cfg.fusion.match_config()) {
        Ok(m) => m,
        Err(_) => return (RegistrationResult::invalid(0), ms(t0), 0.0),
    };
    // source = candidate points, destination = query points
    let pairs: Vec<_> = matches
        .point_pairs(query, candidate)
        .into_iter()
        .map(|(q, c)| (c, q))
        .collect();
    let matching_ms = ms(t0);
    let t1 = Instant::now();
    let ransac = RansacConfig {
        rng_seed: seed,
        ..cfg.ransac
    };
    let mut result = ransac_register(&pairs, &ransac).unwrap_or_else(|_| RegistrationResult::invalid(0));
    if result.valid && cfg.icp.enabled {
        if let Ok(icp) = icp_refine(candidate.points(), query.points(), &result.transform, cfg.icp.max_corr_dist, cfg.icp.max_iters) {
            if !icp.no_overlap {
                result.transform = icp.transform;
            }
        }
    }
    (result, matching_ms, ms(t1))
}

fn to_body(intr: &CameraIntrinsics, cam: &PoseSE3) -> PoseSE3 {
    let c = &intr.cam_from_lidar;
    c.inverse().compose(cam).compose(c)
}

/// Runs the loop-closure stage for already loaded frames.
pub fn run_frames(
    cfg: &Config,
    intr: &CameraIntrinsics,
    frames: Vec<FrameData>,
    mut skipped: Vec<(FrameId, String)>,
) -> Result<PipelineOutput, PipelineError> {
    if frames.is_empty() {
        return Ok(PipelineOutput {
            outcomes: Vec::new(),
            skipped,
            report: None,
            frames: Vec::new(),
        });
    }
    let agg = build_aggregator(cfg, &frames)?;
    let db = build_database(cfg, &agg, &frames, &mut skipped)?;
    let frames: Vec<FrameData> = frames.into_iter().filter(|f| db.descriptors.contains_key(&f.id)).collect();
    let times: HashMap<FrameId, f64> = frames.iter().map(|f| (f.id, f.timestamp_s)).collect();

    let grid = cfg.fusion.grid();
    let lifted: HashMap<FrameId, FusedPointSet> = frames
        .par_iter()
        .filter_map(|f| match lift_patches(f.embeddings.last(), &f.scan, intr, grid) {
            Ok(set) => Some((f.id, set)),
            Err(e) => {
                warn!("frame {id}: no lifted patches ({e})", id = f.id);
                None
            }
        })
        .collect();

    let window = cfg.retrieval.exclusion_window_s;
    let outcomes: Vec<Result<QueryOutcome, PipelineError>> = frames
        .par_iter()
        .map(|q| {
            let start = Instant::now();
            let (g, r) = &db.descriptors[&q.id];
            let shortlist = two_stage_retrieve(g, r, &db.index, &db.store, cfg.retrieval.n1, cfg.retrieval.n2, |id| {
                id == q.id || (times[&id] - q.timestamp_s).abs() < window
            })?;
            let mut timings = StageTimings {
                retrieval_ms: ms(start),
                ..Default::default()
            };
            let mut results = HashMap::new();
            for cand in &shortlist.entries {
                let result = match (lifted.get(&q.id), lifted.get(&cand.frame_id)) {
                    (Some(qs), Some(cs)) => {
                        let (mut res, m_ms, r_ms) = register_pair(cfg, qs, cs, pair_seed(cfg.pipeline.seed, q.id, cand.frame_id));
                        timings.matching_ms += m_ms;
                        timings.registration_ms += r_ms;
                        res.transform = to_body(intr, &res.transform);
                        res
                    }
                    _ => RegistrationResult::invalid(0),
                };
                results.insert(cand.frame_id, result);
            }
            let ranked = rerank(cfg.pipeline.rerank, &shortlist, &results).expect("every candidate has a result");
            let closure = ranked.first().map(|best| LoopClosure {
                query_id: q.id,
                candidate_id: best.frame_id,
                transform: best.transform,
                inliers: best.inliers,
                retrieval_score: best.retrieval_score,
            });
            timings.total_ms = ms(start);
            Ok(QueryOutcome {
                query_id: q.id,
                timestamp_s: q.timestamp_s,
                shortlist,
                ranked,
                closure,
                timings,
            })
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

    let gt: Vec<GroundTruthFrame> = frames
        .iter()
        .filter_map(|f| {
            f.pose.map(|pose| GroundTruthFrame {
                id: f.id,
                timestamp_s: f.timestamp_s,
                pose,
            })
        })
        .collect();
    let output_frames = frames.iter().map(|f| (f.id, f.timestamp_s)).collect();
    let mut out = PipelineOutput {
        outcomes,
        skipped,
        report: None,
        frames: output_frames,
    };
    if !gt.is_empty() {
        out.report = Some(evaluate(
            &out.records(),
            &gt,
            &cfg.overlap,
            window,
            cfg.pipeline.eval_require_positive,
        )?);
    }
    Ok(out)
}

/// Loads the manifest and frames and runs the pipeline.
pub fn run_manifest(manifest: &Manifest, cfg: &Config) -> Result<PipelineOutput, PipelineError> {
    let intr = manifest.calibration.intrinsics()?;
    let (frames, skipped) = load_frames(manifest);
    let job = || run_frames(cfg, &intr, frames, skipped);
    if cfg.pipeline.threads == 0 {
        job()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.pipeline.threads)
            .build()
            .map_err(|e| PipelineError::ThreadPool(e.to_string()))?
            .install(job)
    }
}

pub fn run_pipeline(manifest_path: impl AsRef<Path>, config_path: impl AsRef<Path>) -> Result<PipelineOutput, PipelineError> {
    let cfg = Config::load(config_path)?;
    let manifest = Manifest::load(manifest_path)?;
    run_manifest(&manifest, &cfg)
}

fn fmt_pose(p: &PoseSE3) -> String {
    let t = p.translation();
    let q = p.quaternion_xyzw();
    format!(
        "{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
        t.x, t.y, t.z, q[0], q[1], q[2], q[3]
    )
}

pub const CLOSURES_HEADER: &str = "query_id,candidate_id,tx,ty,tz,qx,qy,qz,qw,inliers,retrieval_score";

/// Accepted closures; identical bytes for identical inputs, config and seed.
pub fn closures_csv(out: &PipelineOutput) -> String {
    let mut s = format!("{CLOSURES_HEADER}\n");
    for c in out.closures() {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.9}",
            c.query_id,
            c.candidate_id,
            fmt_pose(&c.transform),
            c.inliers,
            c.retrieval_score
        );
    }
    s
}

pub fn retrievals_csv(out: &PipelineOutput) -> String {
    let mut s = String::from("query_id,rank,candidate_id,score\n");
    for o in &out.outcomes {
        for (rank, e) in o.shortlist.entries.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{:.9}", o.query_id, rank + 1, e.frame_id, e.score);
        }
    }
    s
}

pub fn frames_csv(out: &PipelineOutput) -> String {
    let mut s = String::from("frame_id,timestamp_s\n");
    for (id, t) in &out.frames {
        let _ = writeln!(s, "{id},{t}");
    }
    s
}

pub fn timings_csv(out: &PipelineOutput) -> String {
    let mut s = String::from("query_id,retrieval_ms,matching_ms,registration_ms,total_ms\n");
    for o in &out.outcomes {
        let t = &o.timings;
        let _ = writeln!(
            s,
            "{},{:.3},{:.3},{:.3},{:.3}",
            o.query_id, t.retrieval_ms, t.matching_ms, t.registration_ms, t.total_ms
        );
    }
    s
}

/// Writes the run's CSV files, plus `report.{md,csv,json}` when an
/// evaluation is available.
pub fn write_outputs(out: &PipelineOutput, dir: impl AsRef<Path>) -> std::io::Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("loop_closures.csv"), closures_csv(out))?;
    std::fs::write(dir.join("retrievals.csv"), retrievals_csv(out))?;
    std::fs::write(dir.join("frames.csv"), frames_csv(out))?;
    std::fs::write(dir.join("timings.csv"), timings_csv(out))?;
    if let Some(r) = &out.report {
        write_report(r, dir)?;
    }
    Ok(())
}

pub fn write_report(r: &EvalReport, dir: &Path) -> std::io::Result<()> {
    std::fs::write(dir.join("report.md"), r.to_markdown("MPRF"))?;
    std::fs::write(dir.join("report.csv"), r.to_csv())?;
    let json = serde_json::to_string_pretty(r).expect("report is always serializable");
    std::fs::write(dir.join("report.json"), json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_seeds_differ() {
        let a = pair_seed(0, 1, 2);
        assert_ne!(a, pair_seed(0, 2, 1));
        assert_ne!(a, pair_seed(1, 1, 2));
        assert_eq!(a, pair_seed(0, 1, 2));
    }

    #[test]
    fn body_conversion_round_trip() {
        let c = PoseSE3::from_quaternion_xyzw([0.5, -0.5, 0.5, -0.5], nalgebra::Vector3::new(0.1, 0.0, -0.2)).unwrap();
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100, c).unwrap();
        let body = PoseSE3::from_yaw_deg(20.0, nalgebra::Vector3::new(1.0, 2.0, 0.0));
        let cam = c.compose(&body).compose(&c.inverse());
        assert!(to_body(&intr, &cam).max_abs_diff(&body) < 1e-12);
    }
}

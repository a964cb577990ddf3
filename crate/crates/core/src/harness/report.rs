//! Evaluation against ground truth and report files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{
    precision_at_k, threshold_markdown, threshold_table, MetricError, PRECISION_KS, TRANSLATION_THRESHOLDS_M,
    YAW_THRESHOLDS_DEG,
};
use super::overlap::{compute_overlap, MatchMatrix, OverlapParams};
use crate::geometry::{se3_relative, PoseSE3};
use crate::pose::{pose_errors, PoseErrors};
use crate::retrieval::{FrameId, Shortlist};

/// What one query produced, independent of how it was computed.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: FrameId,
    pub shortlist: Shortlist,
    /// Accepted closure: candidate id and estimated `query_from_candidate`.
    pub closure: Option<(FrameId, PoseSE3)>,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthFrame {
    pub id: FrameId,
    pub timestamp_s: f64,
    pub pose: PoseSE3,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// Queries that entered the metrics.
    pub num_queries: usize,
    pub precision_at: BTreeMap<usize, f64>,
    pub yaw_table: Vec<f64>,
    pub dx_table: Vec<f64>,
    pub dy_table: Vec<f64>,
    pub mean_yaw_err: f64,
    pub mean_dx: f64,
    pub mean_dy: f64,
    pub poses_estimated: usize,
    /// Post-extraction wall clock averaged over every processed query.
    pub mean_query_time_ms: f64,
}

/// Error of an accepted closure against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosureError {
    pub query_id: FrameId,
    pub candidate_id: FrameId,
    pub errors: PoseErrors,
}

impl ClosureError {
    pub fn planar_m(&self) -> f64 {
        self.errors.dx_m.hypot(self.errors.dy_m)
    }
}

/// Errors of every accepted closure whose two frames have ground truth.
pub fn closure_errors(records: &[QueryRecord], gt: &[GroundTruthFrame]) -> Vec<ClosureError> {
    let by_id: HashMap<FrameId, &GroundTruthFrame> = gt.iter().map(|g| (g.id, g)).collect();
    records
        .iter()
        .filter_map(|r| {
            let (cand, est) = r.closure?;
            let q = by_id.get(&r.query_id)?;
            let c = by_id.get(&cand)?;
            Some(ClosureError {
                query_id: r.query_id,
                candidate_id: cand,
                errors: pose_errors(&est, &se3_relative(&q.pose, &c.pose)),
            })
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores queries that have ground truth and a non-empty shortlist. With
/// `require_positive`, queries without any true match outside the exclusion
/// window are left out too. Pose tables use the same query set; a query with
/// no accepted closure counts as a failure at every threshold.
pub fn evaluate(
    records: &[QueryRecord],
    gt: &[GroundTruthFrame],
    overlap: &OverlapParams,
    exclusion_window_s: f64,
    require_positive: bool,
) -> Result<EvalReport, MetricError> {
    let mut report = EvalReport {
        mean_query_time_ms: mean(records.iter().map(|r| r.total_ms)),
        ..Default::default()
    };
    if gt.is_empty() {
        return Ok(report);
    }
    let ids: Vec<FrameId> = gt.iter().map(|g| g.id).collect();
    let matrix = MatchMatrix::from_fn(ids, |i, j| compute_overlap(&gt[i].pose, &gt[j].pose, overlap) > overlap.tau_o)
        .map_err(|_| MetricError::NoQueries)?;
    let by_id: HashMap<FrameId, (usize, &GroundTruthFrame)> = gt.iter().enumerate().map(|(i, g)| (g.id, (i, g))).collect();

    let mut evaluated = Vec::new();
    for r in records {
        let Some(&(qi, q)) = by_id.get(&r.query_id) else { continue };
        if r.shortlist.is_empty() || r.shortlist.entries.iter().any(|e| !by_id.contains_key(&e.frame_id)) {
            continue;
        }
        if require_positive {
            let has_positive = gt.iter().enumerate().any(|(j, c)| {
                j != qi && matrix.at(qi, j) && (c.timestamp_s - q.timestamp_s).abs() >= exclusion_window_s
            });
            if !has_positive {
                continue;
            }
        }
        evaluated.push(r);
    }
    report.num_queries = evaluated.len();
    if evaluated.is_empty() {
        return Ok(report);
    }

    let retrievals: Vec<(FrameId, Shortlist)> = evaluated.iter().map(|r| (r.query_id, r.shortlist.clone())).collect();
    for k in PRECISION_KS {
        report.precision_at.insert(k, precision_at_k(&retrievals, &matrix, k)?);
    }

    let owned: Vec<QueryRecord> = evaluated.iter().map(|r| (*r).clone()).collect();
    let errs: HashMap<FrameId, PoseErrors> = closure_errors(&owned, gt)
        .into_iter()
        .map(|e| (e.query_id, e.errors))
        .collect();
    let column = |f: fn(&PoseErrors) -> f64| -> Vec<f64> {
        evaluated
            .iter()
            .map(|r| errs.get(&r.query_id).map_or(f64::INFINITY, f))
            .collect()
    };
    let yaw = column(|e| e.yaw_deg);
    let dx = column(|e| e.dx_m);
    let dy = column(|e| e.dy_m);
    report.yaw_table = threshold_table(&yaw, &YAW_THRESHOLDS_DEG)?;
    report.dx_table = threshold_table(&dx, &TRANSLATION_THRESHOLDS_M)?;
    report.dy_table = threshold_table(&dy, &TRANSLATION_THRESHOLDS_M)?;
    report.poses_estimated = errs.len();
    report.mean_yaw_err = mean(errs.values().map(|e| e.yaw_deg));
    report.mean_dx = mean(errs.values().map(|e| e.dx_m));
    report.mean_dy = mean(errs.values().map(|e| e.dy_m));
    Ok(report)
}

impl EvalReport {
    /// Markdown tables with the same column layout as the published
    /// retrieval, pose-summary and threshold tables.
    pub fn to_markdown(&self, model: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Evaluated queries: {}\n", self.num_queries);
        s.push_str("Precision at Top-k and average retrieval time (post-extraction)\n\n");
        s.push_str("| Model | Precision@1 | Precision@5 | Precision@10 | Time (ms) |\n|---|---|---|---|---|\n");
        let p = |k| self.precision_at.get(&k).map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        let _ = writeln!(s, "| {model} | {} | {} | {} | {:.2} |\n", p(1), p(5), p(10), self.mean_query_time_ms);
        s.push_str("Pose estimation: average errors and total poses estimated\n\n");
        s.push_str("| Model | Yaw Error (°) | DX Error (m) | DY Error (m) | Poses Estimated |\n|---|---|---|---|---|\n");
        let _ = writeln!(
            s,
            "| {model} | {:.2} | {:.2} | {:.2} | {} |\n",
            self.mean_yaw_err, self.mean_dx, self.mean_dy, self.poses_estimated
        );
        if !self.yaw_table.is_empty() {
            let rows = |v: &Vec<f64>| vec![(model, v.clone())];
            s.push_str(&threshold_markdown(
                "Percentage of estimated poses with yaw error below thresholds",
                "°",
                &YAW_THRESHOLDS_DEG,
                &rows(&self.yaw_table),
            ));
            s.push('\n');
            s.push_str(&threshold_markdown(
                "Percentage of estimated poses with translation error in X below thresholds",
                "m",
                &TRANSLATION_THRESHOLDS_M,
                &rows(&self.dx_table),
            ));
            s.push('\n');
            s.push_str(&threshold_markdown(
                "Percentage of estimated poses with translation error in Y below thresholds",
                "m",
                &TRANSLATION_THRESHOLDS_M,
                &rows(&self.dy_table),
            ));
        }
        s
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "num_queries,{}", self.num_queries);
        for (k, v) in &self.precision_at {
            let _ = writeln!(s, "precision_at_{k},{v:.6}");
        }
        for (t, v) in YAW_THRESHOLDS_DEG.iter().zip(&self.yaw_table) {
            let _ = writeln!(s, "yaw_below_{t}deg_pct,{v:.4}");
        }
        for (t, v) in TRANSLATION_THRESHOLDS_M.iter().zip(&self.dx_table) {
            let _ = writeln!(s, "dx_below_{t}m_pct,{v:.4}");
        }
        for (t, v) in TRANSLATION_THRESHOLDS_M.iter().zip(&self.dy_table) {
            let _ = writeln!(s, "dy_below_{t}m_pct,{v:.4}");
        }
        let _ = writeln!(s, "mean_yaw_err_deg,{:.6}", self.mean_yaw_err);
        let _ = writeln!(s, "mean_dx_m,{:.6}", self.mean_dx);
        let _ = writeln!(s, "mean_dy_m,{:.6}", self.mean_dy);
        let _ = writeln!(s, "poses_estimated,{}", self.poses_estimated);
        let _ = writeln!(s, "mean_query_time_ms,{:.3}", self.mean_query_time_ms);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::ScoredFrame;
    use nalgebra::Vector3;

    fn gt(id: FrameId, t: f64, x: f64) -> GroundTruthFrame {
        GroundTruthFrame {
            id,
            timestamp_s: t,
            pose: PoseSE3::from_translation(Vector3::new(x, 0.0, 0.0)),
        }
    }

    fn record(q: FrameId, ids: &[FrameId], closure: Option<(FrameId, PoseSE3)>) -> QueryRecord {
        QueryRecord {
            query_id: q,
            shortlist: Shortlist {
                entries: ids.iter().map(|&frame_id| ScoredFrame { frame_id, score: 0.5 }).collect(),
            },
            closure,
            total_ms: 2.0,
        }
    }

    #[test]
    fn evaluate_small_world() {
        // 1 and 3 share a place 100 s apart; 2 and 4 are elsewhere
        let frames = vec![gt(1, 0.0, 0.0), gt(2, 50.0, 500.0), gt(3, 100.0, 0.5), gt(4, 150.0, 900.0)];
        let est = PoseSE3::from_translation(Vector3::new(0.5, 0.0, 0.0));
        let records = vec![
            record(1, &[3, 2], Some((3, est))),
            record(3, &[2, 1], None),
            record(2, &[4], None),
            record(4, &[], None),
        ];
        let r = evaluate(&records, &frames, &OverlapParams::default(), 30.0, true).unwrap();
        assert_eq!(r.num_queries, 2);
        assert_eq!(r.precision_at[&1], 0.5);
        assert_eq!(r.precision_at[&5], 0.5);
        assert_eq!(r.poses_estimated, 1);
        assert_eq!(r.yaw_table, vec![50.0; 4]);
        assert_eq!(r.dx_table, vec![50.0; 5]);
        assert!(r.mean_yaw_err < 1e-12 && r.mean_dx < 1e-12);
        assert_eq!(r.mean_query_time_ms, 2.0);

        let all = evaluate(&records, &frames, &OverlapParams::default(), 30.0, false).unwrap();
        assert_eq!(all.num_queries, 3);

        let md = r.to_markdown("MPRF");
        assert!(md.contains("| Model | < 2° | < 3° | < 5° | < 10° |"));
        assert!(md.contains("| Model | < 1m | < 2m | < 3m | < 5m | < 10m |"));
        assert!(md.contains("| MPRF | 50.00 | 50.00 | 50.00 | 50.00 |"));
        assert!(r.to_csv().contains("precision_at_1,0.500000"));
    }

    #[test]
    fn empty_inputs_give_empty_report() {
        let r = evaluate(&[], &[], &OverlapParams::default(), 30.0, true).unwrap();
        assert_eq!(r, EvalReport::default());
        assert!(r.to_markdown("x").contains("n/a"));
    }
}

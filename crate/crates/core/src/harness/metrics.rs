//! Retrieval precision and error-threshold tables.

use std::fmt::Write as _;

use thiserror::Error;

use super::overlap::MatchMatrix;
use crate::retrieval::{FrameId, Shortlist};

pub const YAW_THRESHOLDS_DEG: [f64; 4] = [2.0, 3.0, 5.0, 10.0];
pub const TRANSLATION_THRESHOLDS_M: [f64; 5] = [1.0, 2.0, 3.0, 5.0, 10.0];
pub const PRECISION_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("query {0} has an empty shortlist")]
    EmptyShortlist(FrameId),
    #[error("frame {0} is missing from the ground truth")]
    UnknownFrame(FrameId),
    #[error("k must be positive")]
    ZeroK,
    #[error("error list is empty")]
    NoErrors,
    #[error("thresholds must be strictly increasing")]
    ThresholdsNotIncreasing,
}

/// Mean over queries of the fraction of true matches among the first
/// `min(k, returned)` candidates.
pub fn precision_at_k(
    retrievals: &[(FrameId, Shortlist)],
    gt: &MatchMatrix,
    k: usize,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if retrievals.is_empty() {
        return Err(MetricError::NoQueries);
    }
    let mut total = 0.0;
    for (query, shortlist) in retrievals {
        if shortlist.is_empty() {
            return Err(MetricError::EmptyShortlist(*query));
        }
        let top = &shortlist.entries[..k.min(shortlist.len())];
        let mut hits = 0usize;
        for e in top {
            if gt.is_match(*query, e.frame_id).ok_or(MetricError::UnknownFrame(e.frame_id))? {
                hits += 1;
            }
        }
        total += hits as f64 / top.len() as f64;
    }
    Ok(total / retrievals.len() as f64)
}

/// Percentage of entries strictly below each threshold. Non-finite entries
/// stand for failed estimates and never pass.
pub fn threshold_table(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>, MetricError> {
    if errors.is_empty() {
        return Err(MetricError::NoErrors);
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(MetricError::ThresholdsNotIncreasing);
    }
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| 100.0 * errors.iter().filter(|&&e| e.is_finite() && e < t).count() as f64 / n)
        .collect())
}

fn fmt_threshold(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{}", t as i64)
    } else {
        format!("{t}")
    }
}

/// Markdown table with one row per model and `< {threshold}{unit}` columns,
/// values to two decimals.
pub fn threshold_markdown(title: &str, unit: &str, thresholds: &[f64], rows: &[(&str, Vec<f64>)]) -> String {
    let mut s = String::new();
    if !title.is_empty() {
        let _ = writeln!(s, "{title}\n");
    }
    s.push_str("| Model |");
    for t in thresholds {
        let _ = write!(s, " < {}{unit} |", fmt_threshold(*t));
    }
    s.push_str("\n|---|");
    for _ in thresholds {
        s.push_str("---|");
    }
    s.push('\n');
    for (name, values) in rows {
        let _ = write!(s, "| {name} |");
        for v in values {
            let _ = write!(s, " {v:.2} |");
        }
        s.push('\n');
    }
    s
}

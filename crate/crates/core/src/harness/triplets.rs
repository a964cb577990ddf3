//! Anchor/positive/negative mining from a posed trajectory.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::overlap::{compute_overlap, OverlapError, OverlapParams};
use crate::geometry::PoseSE3;
use crate::retrieval::FrameId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TripletError {
    #[error("invalid triplet spec: {0}")]
    InvalidSpec(&'static str),
    #[error(transparent)]
    Overlap(#[from] OverlapError),
    #[error("no valid triplet exists")]
    NoValidTriplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletSpec {
    pub pos_overlap_min: f64,
    pub neg_overlap_max: f64,
    pub min_dt_ms: f64,
}

impl Default for TripletSpec {
    fn default() -> Self {
        Self {
            pos_overlap_min: 0.7,
            neg_overlap_max: 0.1,
            min_dt_ms: 100.0,
        }
    }
}

impl TripletSpec {
    pub fn validate(&self) -> Result<(), TripletError> {
        if !(self.pos_overlap_min > self.neg_overlap_max) {
            return Err(TripletError::InvalidSpec("pos_overlap_min must exceed neg_overlap_max"));
        }
        if !(self.min_dt_ms >= 0.0) {
            return Err(TripletError::InvalidSpec("min_dt_ms must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: FrameId,
    pub positive: FrameId,
    pub negative: FrameId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedFrame {
    pub id: FrameId,
    pub timestamp_s: f64,
    pub pose: PoseSE3,
}

/// Draws `count` triplets independently and uniformly from the set of all
/// valid `(anchor, positive, negative)` triples.
pub fn mine_triplets(
    frames: &[PosedFrame],
    overlap: &OverlapParams,
    spec: &TripletSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Triplet>, TripletError> {
    overlap.validate()?;
    spec.validate()?;
    let min_dt = spec.min_dt_ms / 1000.0;
    let mut pools = Vec::new();
    for (a, fa) in frames.iter().enumerate() {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (b, fb) in frames.iter().enumerate() {
            if a == b || (fa.timestamp_s - fb.timestamp_s).abs() < min_dt {
                continue;
            }
            let o = compute_overlap(&fa.pose, &fb.pose, overlap);
            if o > spec.pos_overlap_min {
                pos.push(b);
            } else if o < spec.neg_overlap_max {
                neg.push(b);
            }
        }
        if !pos.is_empty() && !neg.is_empty() {
            pools.push((a, pos, neg));
        }
    }
    if pools.is_empty() {
        return Err(TripletError::NoValidTriplet);
    }
    // Weighting anchors by |pos|·|neg| makes each triple equally likely.
    let weights = pools.iter().map(|(_, p, n)| (p.len() * n.len()) as f64);
    let anchors = WeightedIndex::new(weights).map_err(|_| TripletError::NoValidTriplet)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let (a, pos, neg) = &pools[anchors.sample(&mut rng)];
            let p = pos[rng.random_range(0..pos.len())];
            let n = neg[rng.random_range(0..neg.len())];
            Triplet {
                anchor: frames[*a].id,
                positive: frames[p].id,
                negative: frames[n].id,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use std::collections::HashMap;

    fn frame(id: FrameId, t: f64, x: f64, yaw: f64) -> PosedFrame {
        PosedFrame {
            id,
            timestamp_s: t,
            pose: PoseSE3::from_yaw_deg(yaw, Vector3::new(x, 0.0, 0.0)),
        }
    }

    /// Frames 0..5 revisit the origin, 5..10 sit 500 m away.
    fn two_clusters() -> Vec<PosedFrame> {
        (0..10)
            .map(|i| {
                let x = if i < 5 { i as f64 * 0.1 } else { 500.0 + i as f64 * 0.1 };
                frame(i, i as f64, x, 0.0)
            })
            .collect()
    }

    #[test]
    fn emitted_triplets_satisfy_bounds() {
        let frames = two_clusters();
        let prm = OverlapParams::default();
        let spec = TripletSpec::default();
        let by_id: HashMap<_, _> = frames.iter().map(|f| (f.id, f)).collect();
        let out = mine_triplets(&frames, &prm, &spec, 200, 3).unwrap();
        assert_eq!(out.len(), 200);
        for t in out {
            let (a, p, n) = (by_id[&t.anchor], by_id[&t.positive], by_id[&t.negative]);
            assert!(compute_overlap(&a.pose, &p.pose, &prm) > 0.7);
            assert!(compute_overlap(&a.pose, &n.pose, &prm) < 0.1);
            assert!((a.timestamp_s - p.timestamp_s).abs() >= 0.1);
            assert!((a.timestamp_s - n.timestamp_s).abs() >= 0.1);
        }
    }

    #[test]
    fn all_overlapping_has_no_negative() {
        let frames: Vec<_> = (0..6).map(|i| frame(i, i as f64, 0.0, 0.0)).collect();
        assert_eq!(
            mine_triplets(&frames, &OverlapParams::default(), &TripletSpec::default(), 5, 0),
            Err(TripletError::NoValidTriplet)
        );
    }

    #[test]
    fn temporal_separation_is_enforced() {
        // every positive lies within 90 ms of the anchor
        let mut frames: Vec<_> = (0..4).map(|i| frame(i, i as f64 * 0.03, 0.0, 0.0)).collect();
        frames.push(frame(9, 10.0, 900.0, 0.0));
        assert_eq!(
            mine_triplets(&frames, &OverlapParams::default(), &TripletSpec::default(), 5, 0),
            Err(TripletError::NoValidTriplet)
        );
    }

    #[test]
    fn deterministic_and_uniform() {
        let frames = two_clusters();
        let prm = OverlapParams::default();
        let spec = TripletSpec::default();
        let a = mine_triplets(&frames, &prm, &spec, 50, 11).unwrap();
        assert_eq!(a, mine_triplets(&frames, &prm, &spec, 50, 11).unwrap());
        assert_ne!(a, mine_triplets(&frames, &prm, &spec, 50, 12).unwrap());

        // each of the 10·4·5 valid triples appears near 20000/200 times
        let out = mine_triplets(&frames, &prm, &spec, 20_000, 1).unwrap();
        let mut counts: HashMap<Triplet, usize> = HashMap::new();
        for t in out {
            *counts.entry(t).or_default() += 1;
        }
        assert_eq!(counts.len(), 200);
        assert!(counts.values().all(|&c| (50..=160).contains(&c)));
    }

    #[test]
    fn spec_validation() {
        let bad = TripletSpec {
            pos_overlap_min: 0.1,
            neg_overlap_max: 0.2,
            ..Default::default()
        };
        assert!(matches!(
            mine_triplets(&two_clusters(), &OverlapParams::default(), &bad, 1, 0),
            Err(TripletError::InvalidSpec(_))
        ));
    }
}

//! Ground-truth match labels from poses with the angular × positional
//! overlap model.
//!
//! Drives a 50-pose loop with a heading offset on the return leg, labels all
//! pairs and lists the matches for a few frames.
//!
//! cargo run --example overlap_labels

use mprf::geometry::PoseSE3;
use mprf::harness::overlap::{compute_overlap, label_pairs, OverlapParams};
use mprf::retrieval::FrameId;
use nalgebra::Vector3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = OverlapParams::default();
    // Out along x at 2 m spacing, then back 1 m to the side.
    let frames: Vec<(FrameId, PoseSE3)> = (0..50u64)
        .map(|i| {
            let pose = if i < 25 {
                PoseSE3::from_yaw_deg(0.0, Vector3::new(2.0 * i as f64, 0.0, 0.0))
            } else {
                PoseSE3::from_yaw_deg(10.0, Vector3::new(2.0 * (49 - i) as f64, 1.0, 0.0))
            };
            (i, pose)
        })
        .collect();

    let m = label_pairs(&frames, &params)?;
    let total: usize = (0..m.len()).map(|i| (0..m.len()).filter(|&j| m.at(i, j)).count()).sum();
    println!("{} frames, {total} ordered match pairs at tau_o = {}", m.len(), params.tau_o);
    for q in [0u64, 10, 30, 49] {
        let matches = m.matches_of(q);
        let o = |c: FrameId| compute_overlap(&frames[q as usize].1, &frames[c as usize].1, &params);
        let listed: Vec<String> = matches.iter().map(|&c| format!("{c} ({:.2})", o(c))).collect();
        println!("frame {q:>2}: {}", listed.join(", "));
    }
    Ok(())
}

//! Sampling training triplets from a posed sequence.
//!
//! cargo run --example triplet_mining

use std::collections::HashMap;

use mprf::geometry::PoseSE3;
use mprf::harness::overlap::{compute_overlap, OverlapParams};
use mprf::harness::triplets::{mine_triplets, PosedFrame, TripletSpec};
use nalgebra::Vector3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Two laps of a 40 m straight at 10 Hz, then a detour that never overlaps.
    let mut frames = Vec::new();
    for lap in 0..2 {
        for i in 0..40 {
            frames.push(PosedFrame {
                id: frames.len() as u64,
                timestamp_s: frames.len() as f64 * 0.1,
                pose: PoseSE3::from_yaw_deg(0.0, Vector3::new(i as f64, 0.3 * lap as f64, 0.0)),
            });
        }
    }
    for i in 0..20 {
        frames.push(PosedFrame {
            id: frames.len() as u64,
            timestamp_s: frames.len() as f64 * 0.1,
            pose: PoseSE3::from_yaw_deg(90.0, Vector3::new(200.0, i as f64, 0.0)),
        });
    }

    let params = OverlapParams::default();
    let spec = TripletSpec::default();
    let triplets = mine_triplets(&frames, &params, &spec, 2000, 42)?;
    let by_id: HashMap<u64, &PosedFrame> = frames.iter().map(|f| (f.id, f)).collect();
    let o = |a: u64, b: u64| compute_overlap(&by_id[&a].pose, &by_id[&b].pose, &params);

    let min_pos = triplets.iter().map(|t| o(t.anchor, t.positive)).fold(f64::INFINITY, f64::min);
    let max_neg = triplets.iter().map(|t| o(t.anchor, t.negative)).fold(0.0, f64::max);
    let detour_negatives = triplets.iter().filter(|t| t.negative >= 80).count();
    println!("{} triplets; positive overlap >= {min_pos:.3}, negative overlap <= {max_neg:.3}", triplets.len());
    println!("negatives drawn from the detour: {detour_negatives}");
    for t in triplets.iter().take(5) {
        println!("  anchor {:>3}  positive {:>3}  negative {:>3}", t.anchor, t.positive, t.negative);
    }
    Ok(())
}

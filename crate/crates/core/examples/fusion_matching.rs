//! Lifting patches into 3D and matching fused descriptors between two views.
//!
//! Uses two revisits of the same synthetic place and one frame from another
//! place, and prints the correspondence counts and their geometric accuracy.
//!
//! cargo run --release --example fusion_matching

use mprf::fusion::{lift_patches, match_correspondences_with, MatchConfig, ThresholdMode};
use mprf::geometry::se3_relative;
use mprf::synth::{SynthConfig, SynthWorld};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = SynthWorld::generate(SynthConfig {
        frames: 48,
        ..Default::default()
    });
    let cfg = world.pipeline_config();
    let grid = cfg.fusion.grid();
    let intr = world.intrinsics;
    let lift = |i: usize| {
        let f = &world.frames[i];
        lift_patches(f.embeddings.last(), &f.scan, &intr, grid)
    };

    let query = &world.frames[0];
    let revisit = world
        .frames
        .iter()
        .position(|f| f.scene == query.scene && f.timestamp_s - query.timestamp_s > 30.0)
        .expect("the world revisits every scene");
    let other = world.frames.iter().position(|f| f.scene != query.scene).unwrap();

    let q = lift(0)?;
    println!("query: {} of {} patches lifted", q.len(), grid.len());
    // Ground-truth camera-frame transform taking candidate points into the query frame.
    let c = intr.cam_from_lidar;
    for (label, idx) in [("revisit", revisit), ("other place", other)] {
        let cand = lift(idx)?;
        let gt = c.compose(&se3_relative(&query.pose, &world.frames[idx].pose)).compose(&c.inverse());
        for mode in [ThresholdMode::After, ThresholdMode::Before] {
            let set = match_correspondences_with(&q, &cand, MatchConfig { threshold: cfg.fusion.threshold, threshold_mode: mode })?;
            let pairs = set.point_pairs(&q, &cand);
            let good = pairs.iter().filter(|(qp, cp)| (gt.transform_point(cp) - qp).norm() < 0.1).count();
            println!("{label:>11} ({mode:?}): {} correspondences, {good} within 0.1 m of ground truth", set.len());
        }
    }
    Ok(())
}

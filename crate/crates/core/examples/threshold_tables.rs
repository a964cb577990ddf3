//! Threshold tables and Precision@k from raw per-query results.
//!
//! cargo run --example threshold_tables

use mprf::harness::metrics::{precision_at_k, threshold_markdown, threshold_table, PRECISION_KS, TRANSLATION_THRESHOLDS_M, YAW_THRESHOLDS_DEG};
use mprf::harness::overlap::MatchMatrix;
use mprf::retrieval::{FrameId, ScoredFrame, Shortlist};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let yaw = Exp::new(0.25)?;
    let dist = Exp::new(0.5)?;
    let mut yaw_a: Vec<f64> = (0..500).map(|_| yaw.sample(&mut rng)).collect();
    let yaw_b: Vec<f64> = (0..500).map(|_| yaw.sample(&mut rng) * 0.5).collect();
    // Queries without an estimate count as failures.
    yaw_a.extend([f64::INFINITY; 20]);
    let dx: Vec<f64> = (0..500).map(|_| dist.sample(&mut rng)).collect();

    println!(
        "{}",
        threshold_markdown(
            "Yaw error",
            "°",
            &YAW_THRESHOLDS_DEG,
            &[("model A", threshold_table(&yaw_a, &YAW_THRESHOLDS_DEG)?), ("model B", threshold_table(&yaw_b, &YAW_THRESHOLDS_DEG)?)],
        )
    );
    println!(
        "{}",
        threshold_markdown("DX error", "m", &TRANSLATION_THRESHOLDS_M, &[("model A", threshold_table(&dx, &TRANSLATION_THRESHOLDS_M)?)])
    );

    // Six frames in two places; frame ids 0..3 match each other, as do 3..6.
    let ids: Vec<FrameId> = (0..6).collect();
    let gt = MatchMatrix::from_fn(ids.clone(), |i, j| i != j && i / 3 == j / 3)?;
    let shortlist = |c: &[FrameId]| Shortlist {
        entries: c
            .iter()
            .enumerate()
            .map(|(r, &frame_id)| ScoredFrame {
                frame_id,
                score: 1.0 - 0.1 * r as f64,
            })
            .collect(),
    };
    let retrievals = vec![
        (0, shortlist(&[1, 3, 2])),
        (1, shortlist(&[4, 0, 5])),
        (3, shortlist(&[5, 4, 0])),
        (4, shortlist(&[2, 3, 1])),
    ];
    for k in PRECISION_KS {
        println!("P@{k} = {:.3}", precision_at_k(&retrievals, &gt, k)?);
    }
    Ok(())
}

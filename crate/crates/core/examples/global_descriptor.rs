//! Global and refinement descriptors from patch embeddings.
//!
//! Fits a small cluster bank on random patch features, then compares the
//! descriptor of an image with a lightly perturbed copy and with an unrelated
//! image.
//!
//! cargo run --example global_descriptor

use mprf::aggregation::{fit_cluster_bank, refine_descriptor, Aggregator, DustbinMarginal};
use mprf::geometry::cosine_similarity;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PATCHES: usize = 256;
const DIM: usize = 32;

fn image(rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(PATCHES, DIM, |_, _| rng.random_range(-1.0..1.0))
}

fn perturb(m: &DMatrix<f64>, rng: &mut impl Rng, sigma: f64) -> DMatrix<f64> {
    m.map(|v| v + rng.random_range(-sigma..sigma))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = image(&mut rng);
    let b = image(&mut rng);
    let a2 = perturb(&a, &mut rng, 0.05);

    let samples = DMatrix::from_rows(&a.row_iter().chain(b.row_iter()).collect::<Vec<_>>());
    let bank = fit_cluster_bank(&samples, 16, 8, 0)?;
    println!(
        "bank: {} clusters, {} -> {} projection, descriptor dim {}",
        bank.clusters(),
        bank.input_dim(),
        bank.proj_dim(),
        bank.descriptor_dim()
    );

    for dustbin in [DustbinMarginal::Uniform, DustbinMarginal::Slack] {
        let mut agg = Aggregator::new(bank.clone());
        agg.dustbin = dustbin;
        let assignment = agg.assign(&a)?;
        let (ga, ga2, gb) = (agg.global_descriptor(&a)?, agg.global_descriptor(&a2)?, agg.global_descriptor(&b)?);
        println!(
            "{dustbin:?}: dustbin mass {:.1} of {PATCHES}, cos(a, a') = {:.4}, cos(a, b) = {:.4}",
            assignment.dustbin_mass(),
            cosine_similarity(ga.values(), ga2.values())?,
            cosine_similarity(ga.values(), gb.values())?
        );
    }

    // Refinement descriptors average the last three layers.
    let layers = |m: &DMatrix<f64>, rng: &mut ChaCha8Rng| vec![perturb(m, rng, 0.3), perturb(m, rng, 0.2), m.clone()];
    let ra = refine_descriptor(&layers(&a, &mut rng))?;
    let ra2 = refine_descriptor(&layers(&a2, &mut rng))?;
    let rb = refine_descriptor(&layers(&b, &mut rng))?;
    println!(
        "refinement (dim {}): cos(a, a') = {:.4}, cos(a, b) = {:.4}",
        ra.dim(),
        cosine_similarity(ra.values(), ra2.values())?,
        cosine_similarity(ra.values(), rb.values())?
    );
    Ok(())
}

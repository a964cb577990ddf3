//! Two-stage retrieval over an exact and an inverted-file index.
//!
//! Builds a database of noisy copies of a few place prototypes, then queries
//! with fresh noisy copies and reports top-1 accuracy for both index kinds.
//!
//! cargo run --example retrieval

use mprf::aggregation::{GlobalDescriptor, RefinementDescriptor};
use mprf::retrieval::{two_stage_retrieve, DescriptorIndex, FrameId, RefinementStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const PLACES: usize = 25;
const PER_PLACE: usize = 40;
const DIM: usize = 64;

fn noisy(proto: &[f64], rng: &mut ChaCha8Rng, sigma: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sigma).unwrap();
    proto.iter().map(|v| v + n.sample(rng)).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let unit = Normal::new(0.0, 1.0)?;
    let protos: Vec<Vec<f64>> = (0..PLACES).map(|_| (0..DIM).map(|_| unit.sample(&mut rng)).collect()).collect();
    let place_of = |id: FrameId| id as usize / PER_PLACE;

    let mut exact = DescriptorIndex::exact();
    let mut ivf = DescriptorIndex::inverted_file(0, 4);
    let mut store = RefinementStore::new();
    for id in 0..(PLACES * PER_PLACE) as FrameId {
        let p = &protos[place_of(id)];
        let g = GlobalDescriptor::normalized(noisy(p, &mut rng, 0.8))?;
        exact.add(id, &g)?;
        ivf.add(id, &g)?;
        store.insert(id, RefinementDescriptor::normalized(noisy(p, &mut rng, 0.4))?)?;
    }
    ivf.train_lists(0)?;

    let queries: Vec<(usize, GlobalDescriptor, RefinementDescriptor)> = (0..200)
        .map(|i| {
            let place = i % PLACES;
            let g = GlobalDescriptor::normalized(noisy(&protos[place], &mut rng, 0.8)).unwrap();
            let r = RefinementDescriptor::normalized(noisy(&protos[place], &mut rng, 0.4)).unwrap();
            (place, g, r)
        })
        .collect();

    for (name, index) in [("exact", &exact), ("inverted file", &ivf)] {
        let mut global_hits = 0;
        let mut refined_hits = 0;
        for (place, g, r) in &queries {
            let top = index.search_topk(g, 1, |_| false)?;
            global_hits += usize::from(top.top().is_some_and(|s| place_of(s.frame_id) == *place));
            let sl = two_stage_retrieve(g, r, index, &store, 20, 10, |_| false)?;
            refined_hits += usize::from(sl.top().is_some_and(|s| place_of(s.frame_id) == *place));
        }
        println!(
            "{name:>13}: top-1 global {:.1}%, after refinement {:.1}%",
            100.0 * global_hits as f64 / queries.len() as f64,
            100.0 * refined_hits as f64 / queries.len() as f64
        );
    }
    Ok(())
}

//! Cosine nearest-neighbour index over global descriptors and the two-stage
//! (global shortlist → refinement re-rank) retrieval.
//!
//! Exact mode is a brute-force scan. Inverted-file mode clusters the stored
//! descriptors with k-means and scans only the `n_probe` lists whose
//! centroids are closest to the query; with `n_probe == n_lists` it returns
//! the same result as exact mode.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::aggregation::{GlobalDescriptor, RefinementDescriptor};
use crate::geometry::dot;
use crate::kmeans::{kmeans, sq_dist, KMeansConfig};

pub type FrameId = u64;

pub const DEFAULT_N1: usize = 20;
pub const DEFAULT_N2: usize = 10;
pub const DEFAULT_N_PROBE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("frame {0} is already indexed")]
    DuplicateId(FrameId),
    #[error("descriptor dim {got} does not match index dim {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("inverted-file index has not been trained")]
    NotTrained,
    #[error("n2 ({n2}) must not exceed n1 ({n1})")]
    ShortlistSizes { n1: usize, n2: usize },
    #[error("no refinement descriptor for frame {0}")]
    MissingRefinement(FrameId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexMode {
    Exact,
    InvertedFile { n_lists: usize, n_probe: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredFrame {
    pub frame_id: FrameId,
    pub score: f64,
}

/// Candidates in descending score order, no duplicate ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Shortlist {
    pub entries: Vec<ScoredFrame>,
}

impl Shortlist {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<FrameId> {
        self.entries.iter().map(|e| e.frame_id).collect()
    }

    pub fn top(&self) -> Option<&ScoredFrame> {
        self.entries.first()
    }
}

/// Descending score, ties by ascending frame id.
fn rank_order(a: &ScoredFrame, b: &ScoredFrame) -> Ordering {
    b.score.total_cmp(&a.score).then(a.frame_id.cmp(&b.frame_id))
}

fn top_k(mut scored: Vec<ScoredFrame>, k: usize) -> Shortlist {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Shortlist { entries: scored }
}

#[derive(Debug, Clone)]
struct InvertedLists {
    centroids: Vec<f64>,
    lists: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct DescriptorIndex {
    ids: Vec<FrameId>,
    /// Row-major `len × dim`.
    vectors: Vec<f64>,
    dim: usize,
    id_set: HashSet<FrameId>,
    mode: IndexMode,
    ivf: Option<InvertedLists>,
}

impl Default for DescriptorIndex {
    fn default() -> Self {
        Self::new(IndexMode::Exact)
    }
}

impl DescriptorIndex {
    pub fn new(mode: IndexMode) -> Self {
        Self {
            ids: Vec::new(),
            vectors: Vec::new(),
            dim: 0,
            id_set: HashSet::new(),
            mode,
            ivf: None,
        }
    }

    pub fn exact() -> Self {
        Self::new(IndexMode::Exact)
    }

    /// `n_lists == 0` picks `⌈√N⌉` at training time.
    pub fn inverted_file(n_lists: usize, n_probe: usize) -> Self {
        Self::new(IndexMode::InvertedFile { n_lists, n_probe })
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, id: FrameId) -> bool {
        self.id_set.contains(&id)
    }

    pub fn vector(&self, slot: usize) -> &[f64] {
        &self.vectors[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Stored `(frame_id, descriptor values)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (FrameId, &[f64])> {
        self.ids.iter().enumerate().map(|(i, id)| (*id, self.vector(i)))
    }

    pub fn add(&mut self, frame_id: FrameId, desc: &GlobalDescriptor) -> Result<(), RetrievalError> {
        if self.id_set.contains(&frame_id) {
            return Err(RetrievalError::DuplicateId(frame_id));
        }
        if self.ids.is_empty() {
            self.dim = desc.dim();
        } else if desc.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: desc.dim(),
            });
        }
        let slot = self.ids.len();
        self.ids.push(frame_id);
        self.id_set.insert(frame_id);
        self.vectors.extend_from_slice(desc.values());
        if let Some(ivf) = &mut self.ivf {
            let list = nearest_list(&ivf.centroids, self.dim, desc.values());
            ivf.lists[list].push(slot);
        }
        Ok(())
    }

    /// Builds the coarse quantizer for inverted-file mode. A no-op in exact mode.
    pub fn train_lists(&mut self, seed: u64) -> Result<(), RetrievalError> {
        let IndexMode::InvertedFile { n_lists, .. } = self.mode else {
            return Ok(());
        };
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let n = self.len();
        let lists = if n_lists == 0 {
            (n as f64).sqrt().ceil() as usize
        } else {
            n_lists
        }
        .clamp(1, n);
        let km = kmeans(&self.vectors, self.dim, lists, KMeansConfig::default(), seed);
        let mut members = vec![Vec::new(); lists];
        for (slot, &label) in km.labels.iter().enumerate() {
            members[label].push(slot);
        }
        self.ivf = Some(InvertedLists {
            centroids: km.centers,
            lists: members,
        });
        Ok(())
    }

    fn candidate_slots(&self, query: &[f64]) -> Result<Vec<usize>, RetrievalError> {
        match self.mode {
            IndexMode::Exact => Ok((0..self.len()).collect()),
            IndexMode::InvertedFile { n_probe, .. } => {
                let ivf = self.ivf.as_ref().ok_or(RetrievalError::NotTrained)?;
                let mut order: Vec<(usize, f64)> = ivf
                    .centroids
                    .chunks_exact(self.dim)
                    .map(|c| sq_dist(c, query))
                    .enumerate()
                    .collect();
                order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                let mut slots: Vec<usize> = order
                    .iter()
                    .take(n_probe.max(1))
                    .flat_map(|(l, _)| ivf.lists[*l].iter().copied())
                    .collect();
                slots.sort_unstable();
                Ok(slots)
            }
        }
    }

    /// Top-`k` stored frames by cosine similarity, skipping ids for which
    /// `exclude` returns true. Ties go to the smaller frame id.
    pub fn search_topk(
        &self,
        query: &GlobalDescriptor,
        k: usize,
        exclude: impl Fn(FrameId) -> bool,
    ) -> Result<Shortlist, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let q = query.values();
        let scored: Vec<ScoredFrame> = self
            .candidate_slots(q)?
            .into_iter()
            .filter(|&s| !exclude(self.ids[s]))
            .map(|s| ScoredFrame {
                frame_id: self.ids[s],
                score: dot(q, self.vector(s)).clamp(-1.0, 1.0),
            })
            .collect();
        Ok(top_k(scored, k))
    }
}

fn nearest_list(centroids: &[f64], dim: usize, v: &[f64]) -> usize {
    centroids
        .chunks_exact(dim)
        .map(|c| sq_dist(c, v))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Refinement descriptors keyed by frame id.
#[derive(Debug, Clone, Default)]
pub struct RefinementStore {
    entries: BTreeMap<FrameId, RefinementDescriptor>,
}

impl RefinementStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: FrameId, desc: RefinementDescriptor) -> Result<(), RetrievalError> {
        if self.entries.contains_key(&id) {
            return Err(RetrievalError::DuplicateId(id));
        }
        self.entries.insert(id, desc);
        Ok(())
    }

    pub fn get(&self, id: FrameId) -> Option<&RefinementDescriptor> {
        self.entries.get(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (FrameId, &RefinementDescriptor)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }
}

/// Global shortlist of `n1`, re-ranked by refinement-descriptor cosine,
/// truncated to `n2`. Returned scores are the stage-2 similarities.
pub fn two_stage_retrieve(
    query_global: &GlobalDescriptor,
    query_refinement: &RefinementDescriptor,
    index: &DescriptorIndex,
    store: &RefinementStore,
    n1: usize,
    n2: usize,
    exclude: impl Fn(FrameId) -> bool,
) -> Result<Shortlist, RetrievalError> {
    if n2 > n1 {
        return Err(RetrievalError::ShortlistSizes { n1, n2 });
    }
    if n2 == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let stage1 = index.search_topk(query_global, n1, exclude)?;
    let mut rescored = Vec::with_capacity(stage1.len());
    for cand in &stage1.entries {
        let r = store
            .get(cand.frame_id)
            .ok_or(RetrievalError::MissingRefinement(cand.frame_id))?;
        if r.dim() != query_refinement.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: query_refinement.dim(),
                got: r.dim(),
            });
        }
        rescored.push(ScoredFrame {
            frame_id: cand.frame_id,
            score: dot(query_refinement.values(), r.values()).clamp(-1.0, 1.0),
        });
    }
    Ok(top_k(rescored, n2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut impl Rng, dim: usize) -> GlobalDescriptor {
        GlobalDescriptor::normalized((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn linear_scan(data: &[(FrameId, GlobalDescriptor)], q: &GlobalDescriptor, k: usize) -> Vec<(FrameId, f64)> {
        let mut all: Vec<(FrameId, f64)> = data
            .iter()
            .map(|(id, d)| {
                let s: f64 = d.values().iter().zip(q.values()).map(|(a, b)| a * b).sum();
                (*id, s)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn add_and_self_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut idx = DescriptorIndex::exact();
        let descs: Vec<_> = (0..5).map(|_| random_unit(&mut rng, 16)).collect();
        for (i, d) in descs.iter().enumerate() {
            idx.add(i as FrameId, d).unwrap();
        }
        assert_eq!(idx.len(), 5);
        let hit = idx.search_topk(&descs[3], 1, |_| false).unwrap();
        assert_eq!(hit.entries[0].frame_id, 3);
        assert!((hit.entries[0].score - 1.0).abs() < 1e-12);
        assert_eq!(idx.add(3, &descs[0]), Err(RetrievalError::DuplicateId(3)));
        let all = idx.search_topk(&descs[0], 50, |_| false).unwrap();
        assert_eq!(all.len(), 5);
    }

    #[test]
    fn empty_index_and_bad_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = DescriptorIndex::exact();
        let q = random_unit(&mut rng, 4);
        assert_eq!(idx.search_topk(&q, 1, |_| false), Err(RetrievalError::EmptyIndex));
        assert_eq!(idx.search_topk(&q, 0, |_| false), Err(RetrievalError::InvalidK));
    }

    #[test]
    fn exact_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let data: Vec<(FrameId, GlobalDescriptor)> = (0..1000).map(|i| (i, random_unit(&mut rng, 32))).collect();
        let mut idx = DescriptorIndex::exact();
        for (id, d) in &data {
            idx.add(*id, d).unwrap();
        }
        for _ in 0..20 {
            let q = random_unit(&mut rng, 32);
            let got = idx.search_topk(&q, 10, |_| false).unwrap();
            let want = linear_scan(&data, &q, 10);
            assert_eq!(got.ids(), want.iter().map(|w| w.0).collect::<Vec<_>>());
            for (g, w) in got.entries.iter().zip(&want) {
                assert!((g.score - w.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ivf_full_probe_equals_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<(FrameId, GlobalDescriptor)> = (0..300).map(|i| (i * 7, random_unit(&mut rng, 16))).collect();
        let mut exact = DescriptorIndex::exact();
        let mut ivf = DescriptorIndex::inverted_file(12, 12);
        for (id, d) in data.iter().take(200) {
            exact.add(*id, d).unwrap();
            ivf.add(*id, d).unwrap();
        }
        assert_eq!(ivf.search_topk(&data[0].1, 3, |_| false), Err(RetrievalError::NotTrained));
        ivf.train_lists(5).unwrap();
        // entries added after training go through the quantizer
        for (id, d) in data.iter().skip(200) {
            exact.add(*id, d).unwrap();
            ivf.add(*id, d).unwrap();
        }
        for _ in 0..10 {
            let q = random_unit(&mut rng, 16);
            assert_eq!(
                exact.search_topk(&q, 15, |id| id % 3 == 0).unwrap(),
                ivf.search_topk(&q, 15, |id| id % 3 == 0).unwrap()
            );
        }
    }

    #[test]
    fn ivf_partial_probe_finds_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ivf = DescriptorIndex::inverted_file(0, DEFAULT_N_PROBE);
        let data: Vec<_> = (0..100).map(|i| (i, random_unit(&mut rng, 8))).collect();
        for (id, d) in &data {
            ivf.add(*id, d).unwrap();
        }
        ivf.train_lists(0).unwrap();
        for (id, d) in &data {
            assert_eq!(ivf.search_topk(d, 1, |_| false).unwrap().entries[0].frame_id, *id);
        }
    }

    #[test]
    fn ties_broken_by_ascending_id() {
        let d = GlobalDescriptor::normalized(vec![1.0, 0.0]).unwrap();
        let mut idx = DescriptorIndex::exact();
        for id in [9, 2, 5] {
            idx.add(id, &d).unwrap();
        }
        assert_eq!(idx.search_topk(&d, 3, |_| false).unwrap().ids(), vec![2, 5, 9]);
    }

    fn two_frame_setup() -> (DescriptorIndex, RefinementStore, GlobalDescriptor, RefinementDescriptor) {
        let g = GlobalDescriptor::normalized(vec![1.0, 0.0, 0.0]).unwrap();
        let mut idx = DescriptorIndex::exact();
        idx.add(1, &g).unwrap();
        idx.add(2, &g).unwrap();
        let mut store = RefinementStore::new();
        store.insert(1, RefinementDescriptor::normalized(vec![1.0, 1.0]).unwrap()).unwrap();
        store.insert(2, RefinementDescriptor::normalized(vec![1.0, 0.1]).unwrap()).unwrap();
        let qr = RefinementDescriptor::normalized(vec![1.0, 0.0]).unwrap();
        (idx, store, g, qr)
    }

    #[test]
    fn stage_two_orders_equal_globals() {
        let (idx, store, g, qr) = two_frame_setup();
        let out = two_stage_retrieve(&g, &qr, &idx, &store, 2, 2, |_| false).unwrap();
        // oracle: direct cosine of the refinement vectors
        let c1 = 1.0 / 2f64.sqrt();
        let c2 = 1.0 / (1.0f64 + 0.01).sqrt();
        assert_eq!(out.ids(), vec![2, 1]);
        assert!((out.entries[0].score - c2).abs() < 1e-12);
        assert!((out.entries[1].score - c1).abs() < 1e-12);
    }

    #[test]
    fn stage_two_single_and_errors() {
        let (idx, mut store, g, qr) = two_frame_setup();
        let one = two_stage_retrieve(&g, &qr, &idx, &store, 1, 1, |_| false).unwrap();
        assert_eq!(one.ids(), vec![1]);
        assert_eq!(
            two_stage_retrieve(&g, &qr, &idx, &store, 1, 2, |_| false),
            Err(RetrievalError::ShortlistSizes { n1: 1, n2: 2 })
        );
        store = RefinementStore::new();
        assert_eq!(
            two_stage_retrieve(&g, &qr, &idx, &store, 2, 1, |_| false),
            Err(RetrievalError::MissingRefinement(1))
        );
    }

    #[test]
    fn exclusion_window_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut idx = DescriptorIndex::exact();
        let mut store = RefinementStore::new();
        for id in 0..50 {
            idx.add(id, &random_unit(&mut rng, 8)).unwrap();
            store
                .insert(id, RefinementDescriptor::normalized(vec![1.0, id as f64]).unwrap())
                .unwrap();
        }
        let q = random_unit(&mut rng, 8);
        let qr = RefinementDescriptor::normalized(vec![1.0, 3.0]).unwrap();
        let out = two_stage_retrieve(&q, &qr, &idx, &store, 20, 10, |id| (20..=30).contains(&id)).unwrap();
        assert!(out.ids().iter().all(|id| !(20..=30).contains(id)));
        let stage1 = idx.search_topk(&q, 20, |id| (20..=30).contains(&id)).unwrap().ids();
        assert!(out.ids().iter().all(|id| stage1.contains(id)));
    }
}

//! Global and refinement descriptors from patch embeddings.
//!
//! The global descriptor is a VLAD-style aggregate: patch features are
//! scored against cluster centers plus a dustbin column, the scores are
//! turned into a soft assignment by log-domain Sinkhorn iterations, and
//! projected features are accumulated per cluster (dustbin dropped),
//! intra-normalized, concatenated and normalized again.
//!
//! The refinement descriptor is the patch-average of the per-patch
//! concatenation of the last three layers.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::geometry::{l2_norm, l2_normalize_in_place, ZERO_NORM_EPS};
use crate::kmeans::{kmeans, KMeansConfig};

/// Unit-norm tolerance for descriptor types.
pub const UNIT_TOL: f64 = 1e-6;

pub const DEFAULT_CLUSTERS: usize = 64;
pub const DEFAULT_PROJ_DIM: usize = 128;
pub const DEFAULT_SINKHORN_ITERS: usize = 3;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {k} samples to fit {k} clusters, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("degenerate sample: all features are identical")]
    DegenerateSample,
    #[error("projection dim {d_proj} exceeds feature dim {d_in}")]
    ProjectionTooWide { d_proj: usize, d_in: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("assignment has no patches")]
    NoPatches,
    #[error("assignment row {row} is invalid (sum {sum})")]
    InvalidAssignmentRow { row: usize, sum: f64 },
    #[error("aggregated descriptor is zero (all mass went to the dustbin)")]
    ZeroDescriptor,
    #[error("expected 3 layers, got {0}")]
    LayerCount(usize),
    #[error("descriptor is not unit norm (norm {0})")]
    NotUnitNorm(f64),
    #[error("cluster bank needs at least one cluster and one projected dim")]
    EmptyBank,
}

/// Cluster prototypes, feature projection and dustbin score.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBank {
    centers: DMatrix<f64>,
    projection: DMatrix<f64>,
    dustbin_score: f64,
}

impl ClusterBank {
    /// `centers` is `K × d_in`, `projection` is `d_in × d_proj`.
    pub fn new(centers: DMatrix<f64>, projection: DMatrix<f64>, dustbin_score: f64) -> Result<Self, AggregationError> {
        if centers.nrows() == 0 || projection.ncols() == 0 {
            return Err(AggregationError::EmptyBank);
        }
        if centers.ncols() != projection.nrows() {
            return Err(AggregationError::DimensionMismatch {
                expected: centers.ncols(),
                got: projection.nrows(),
            });
        }
        if centers.iter().chain(projection.iter()).any(|v| !v.is_finite()) || dustbin_score.is_nan() {
            return Err(AggregationError::NonFinite("cluster bank"));
        }
        Ok(Self {
            centers,
            projection,
            dustbin_score,
        })
    }

    pub fn clusters(&self) -> usize {
        self.centers.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn proj_dim(&self) -> usize {
        self.projection.ncols()
    }

    /// `K · d_proj`.
    pub fn descriptor_dim(&self) -> usize {
        self.clusters() * self.proj_dim()
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn dustbin_score(&self) -> f64 {
        self.dustbin_score
    }

    pub fn with_dustbin_score(mut self, score: f64) -> Self {
        self.dustbin_score = score;
        self
    }
}

/// Unsupervised stand-in for learned aggregation parameters.
///
/// Centers come from k-means (k-means++ seeding, at most 100 Lloyd
/// iterations or relative inertia change below 1e-4); the projection is the
/// top-`d_proj` principal directions of the sample; the dustbin score is 0.
pub fn fit_cluster_bank(
    samples: &DMatrix<f64>,
    k: usize,
    d_proj: usize,
    seed: u64,
) -> Result<ClusterBank, AggregationError> {
    let (n, d_in) = samples.shape();
    if k == 0 || d_proj == 0 {
        return Err(AggregationError::EmptyBank);
    }
    if n < k {
        return Err(AggregationError::TooFewSamples { n, k });
    }
    if d_proj > d_in {
        return Err(AggregationError::ProjectionTooWide { d_proj, d_in });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(AggregationError::NonFinite("sample features"));
    }
    let first = samples.row(0);
    if samples.row_iter().all(|r| r == first) {
        return Err(AggregationError::DegenerateSample);
    }

    // Row-major copy for k-means.
    let rows: Vec<f64> = samples.transpose().as_slice().to_vec();
    let km = kmeans(&rows, d_in, k, KMeansConfig::default(), seed);
    let centers = DMatrix::from_row_slice(k, d_in, &km.centers);

    let projection = principal_directions(samples, d_proj);
    ClusterBank::new(centers, projection, 0.0)
}

/// Top `count` eigenvectors of the sample covariance as columns, ordered by
/// decreasing eigenvalue, each signed so its largest-magnitude entry is positive.
fn principal_directions(samples: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let n = samples.nrows() as f64;
    let mean = samples.row_mean();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / n.max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let d_in = samples.ncols();
    let mut proj = DMatrix::zeros(d_in, count);
    for (out, &idx) in order.iter().take(count).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        proj.set_column(out, &(col * sign));
    }
    proj
}

/// `P × (K+1)` scores: patch·center for real clusters, dustbin score in the last column.
pub fn score_matrix(patch_feats: &DMatrix<f64>, bank: &ClusterBank) -> Result<DMatrix<f64>, AggregationError> {
    if patch_feats.ncols() != bank.input_dim() {
        return Err(AggregationError::DimensionMismatch {
            expected: bank.input_dim(),
            got: patch_feats.ncols(),
        });
    }
    let k = bank.clusters();
    let real = patch_feats * bank.centers.transpose();
    Ok(real.insert_column(k, bank.dustbin_score))
}

/// Soft patch-to-cluster assignment. Column `K` is the dustbin.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    weights: DMatrix<f64>,
}

impl AssignmentMatrix {
    /// Wraps explicit weights; every entry must be ≥ 0 and every row must sum
    /// to 1 within [`UNIT_TOL`].
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self, AggregationError> {
        for (r, row) in weights.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > UNIT_TOL {
                return Err(AggregationError::InvalidAssignmentRow { row: r, sum });
            }
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn patches(&self) -> usize {
        self.weights.nrows()
    }

    /// Number of real clusters (excludes the dustbin).
    pub fn clusters(&self) -> usize {
        self.weights.ncols().saturating_sub(1)
    }

    pub fn dustbin_mass(&self) -> f64 {
        self.weights.column(self.weights.ncols() - 1).sum()
    }
}

fn log_sum_exp<'a, I: Iterator<Item = &'a f64>>(values: impl Fn() -> I) -> f64 {
    let m = values().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// How the dustbin column is constrained during the column steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DustbinMarginal {
    /// The dustbin is an ordinary column with marginal `P/(K+1)`. A constant
    /// column is rescaled to the same mass whatever its score, so under this
    /// scheme the dustbin score has no influence on the assignment.
    #[default]
    Uniform,
    /// Real-cluster marginals are capacities: a column step only scales a
    /// real column down when its mass exceeds `P/(K+1)`. The dustbin column
    /// is never column-normalized and absorbs the remainder.
    Slack,
}

/// Log-domain Sinkhorn normalization of `exp(scores / temperature)` with
/// uniform dustbin marginals.
///
/// Row marginals are 1, column marginals `P/(K+1)` (the dustbin is an
/// ordinary column). Each iteration is a column step followed by a row step,
/// so the returned rows sum to 1. With `iterations == 0` only the row step is
/// applied (a row softmax).
pub fn sinkhorn_assign(
    scores: &DMatrix<f64>,
    iterations: usize,
    temperature: f64,
) -> Result<AssignmentMatrix, AggregationError> {
    sinkhorn_assign_with(scores, iterations, temperature, DustbinMarginal::Uniform)
}

/// [`sinkhorn_assign`] with an explicit dustbin treatment.
pub fn sinkhorn_assign_with(
    scores: &DMatrix<f64>,
    iterations: usize,
    temperature: f64,
    dustbin: DustbinMarginal,
) -> Result<AssignmentMatrix, AggregationError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(AggregationError::InvalidTemperature(temperature));
    }
    let (p, cols) = scores.shape();
    if p == 0 || cols == 0 {
        return Err(AggregationError::NoPatches);
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(AggregationError::NonFinite("score matrix"));
    }
    let mut log_p = scores / temperature;
    let log_col_marginal = (p as f64 / cols as f64).ln();

    let row_step = |m: &mut DMatrix<f64>| {
        for mut row in m.row_iter_mut() {
            let lse = log_sum_exp(|| row.iter());
            row.add_scalar_mut(-lse);
        }
    };
    for _ in 0..iterations {
        for (c, mut col) in log_p.column_iter_mut().enumerate() {
            let lse = log_sum_exp(|| col.iter());
            let shift = match dustbin {
                DustbinMarginal::Uniform => log_col_marginal - lse,
                DustbinMarginal::Slack if c + 1 == cols => continue,
                DustbinMarginal::Slack => (log_col_marginal - lse).min(0.0),
            };
            col.add_scalar_mut(shift);
        }
        row_step(&mut log_p);
    }
    if iterations == 0 {
        row_step(&mut log_p);
    }
    Ok(AssignmentMatrix {
        weights: log_p.map(f64::exp),
    })
}

/// Unit-norm global retrieval key of dimension `K · d_proj`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor(Vec<f64>);

/// Unit-norm second-stage descriptor of dimension `3 · d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementDescriptor(Vec<f64>);

macro_rules! unit_descriptor {
    ($ty:ident) => {
        impl $ty {
            /// Accepts values already unit-norm within [`UNIT_TOL`].
            pub fn from_unit(values: Vec<f64>) -> Result<Self, AggregationError> {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(AggregationError::NonFinite(stringify!($ty)));
                }
                let n = l2_norm(&values);
                if (n - 1.0).abs() > UNIT_TOL {
                    return Err(AggregationError::NotUnitNorm(n));
                }
                Ok(Self(values))
            }

            /// Normalizes arbitrary values; fails on a zero vector.
            pub fn normalized(mut values: Vec<f64>) -> Result<Self, AggregationError> {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(AggregationError::NonFinite(stringify!($ty)));
                }
                if !l2_normalize_in_place(&mut values) {
                    return Err(AggregationError::ZeroDescriptor);
                }
                Ok(Self(values))
            }

            pub fn values(&self) -> &[f64] {
                &self.0
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn into_values(self) -> Vec<f64> {
                self.0
            }
        }
    };
}

unit_descriptor!(GlobalDescriptor);
unit_descriptor!(RefinementDescriptor);

/// VLAD-style aggregation of projected features under a soft assignment.
pub fn aggregate_global(
    patch_feats: &DMatrix<f64>,
    assignment: &AssignmentMatrix,
    bank: &ClusterBank,
) -> Result<GlobalDescriptor, AggregationError> {
    if patch_feats.ncols() != bank.input_dim() {
        return Err(AggregationError::DimensionMismatch {
            expected: bank.input_dim(),
            got: patch_feats.ncols(),
        });
    }
    if assignment.patches() != patch_feats.nrows() {
        return Err(AggregationError::DimensionMismatch {
            expected: patch_feats.nrows(),
            got: assignment.patches(),
        });
    }
    if assignment.clusters() != bank.clusters() {
        return Err(AggregationError::DimensionMismatch {
            expected: bank.clusters(),
            got: assignment.clusters(),
        });
    }
    let k = bank.clusters();
    let projected = patch_feats * &bank.projection; // P × d_proj
    let real = assignment.weights.columns(0, k);
    let clusters = real.transpose() * projected; // K × d_proj

    let d_proj = bank.proj_dim();
    let mut out = Vec::with_capacity(k * d_proj);
    for row in clusters.row_iter() {
        let start = out.len();
        out.extend(row.iter().copied());
        // Zero-norm clusters stay zero.
        l2_normalize_in_place(&mut out[start..]);
    }
    if l2_norm(&out) < ZERO_NORM_EPS {
        return Err(AggregationError::ZeroDescriptor);
    }
    GlobalDescriptor::normalized(out)
}

/// Mean over patches of the per-patch concatenation of three layers, l2-normalized.
pub fn refine_descriptor(layers: &[DMatrix<f64>]) -> Result<RefinementDescriptor, AggregationError> {
    if layers.len() != 3 {
        return Err(AggregationError::LayerCount(layers.len()));
    }
    let (p, d_in) = layers[0].shape();
    for l in &layers[1..] {
        if l.shape() != (p, d_in) {
            return Err(AggregationError::DimensionMismatch {
                expected: p * d_in,
                got: l.nrows() * l.ncols(),
            });
        }
    }
    if p == 0 {
        return Err(AggregationError::NoPatches);
    }
    // mean of concatenations = concatenation of means
    let mut out = Vec::with_capacity(3 * d_in);
    for l in layers {
        out.extend(l.row_mean().iter().copied());
    }
    RefinementDescriptor::normalized(out)
}

/// Bundles a cluster bank with Sinkhorn settings.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub bank: ClusterBank,
    pub iterations: usize,
    pub temperature: f64,
    pub dustbin: DustbinMarginal,
}

impl Aggregator {
    pub fn new(bank: ClusterBank) -> Self {
        Self {
            bank,
            iterations: DEFAULT_SINKHORN_ITERS,
            temperature: DEFAULT_TEMPERATURE,
            dustbin: DustbinMarginal::Uniform,
        }
    }

    pub fn assign(&self, patch_feats: &DMatrix<f64>) -> Result<AssignmentMatrix, AggregationError> {
        let scores = score_matrix(patch_feats, &self.bank)?;
        sinkhorn_assign_with(&scores, self.iterations, self.temperature, self.dustbin)
    }

    pub fn global_descriptor(&self, patch_feats: &DMatrix<f64>) -> Result<GlobalDescriptor, AggregationError> {
        let assignment = self.assign(patch_feats)?;
        aggregate_global(patch_feats, &assignment, &self.bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
    }

    fn identity_bank(k: usize, d: usize) -> ClusterBank {
        ClusterBank::new(DMatrix::identity(k, d), DMatrix::identity(d, d), 0.0).unwrap()
    }

    #[test]
    fn fit_recovers_separated_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = 4;
        let d = 6;
        let mut rows = Vec::new();
        let mut means = vec![vec![0.0; d]; k];
        for c in 0..k {
            for _ in 0..25 {
                let row: Vec<f64> = (0..d)
                    .map(|j| if j == c { 50.0 } else { 0.0 } + rng.random_range(-0.5..0.5))
                    .collect();
                for (m, v) in means[c].iter_mut().zip(&row) {
                    *m += v / 25.0;
                }
                rows.extend(row);
            }
        }
        let samples = DMatrix::from_row_slice(k * 25, d, &rows);
        let bank = fit_cluster_bank(&samples, k, 3, 4).unwrap();
        for mean in &means {
            let hit = bank.centers().row_iter().any(|c| {
                c.iter().zip(mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < 1e-6
            });
            assert!(hit);
        }
        assert_eq!(bank.dustbin_score(), 0.0);
        assert_eq!(bank.descriptor_dim(), 12);
        // projection columns orthonormal
        let ptp = bank.projection().transpose() * bank.projection();
        assert!((ptp - DMatrix::identity(3, 3)).amax() < 1e-9);
    }

    #[test]
    fn fit_single_cluster_is_sample_mean() {
        let samples = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 3.0, 2.0, 5.0, 7.0]);
        let bank = fit_cluster_bank(&samples, 1, 1, 0).unwrap();
        assert!((bank.centers()[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((bank.centers()[(0, 1)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fit_is_bit_identical_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = random_matrix(&mut rng, 80, 10, 1.0);
        let a = fit_cluster_bank(&samples, 5, 4, 17).unwrap();
        let b = fit_cluster_bank(&samples, 5, 4, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_errors() {
        let samples = DMatrix::from_element(4, 3, 1.0);
        assert_eq!(fit_cluster_bank(&samples, 2, 2, 0), Err(AggregationError::DegenerateSample));
        assert_eq!(
            fit_cluster_bank(&samples, 5, 2, 0),
            Err(AggregationError::TooFewSamples { n: 4, k: 5 })
        );
    }

    #[test]
    fn score_matrix_examples() {
        let bank = identity_bank(3, 3);
        let feats = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]);
        let s = score_matrix(&feats, &bank).unwrap();
        assert_eq!(s.ncols(), 4);
        let argmax = (0..3).max_by(|&a, &b| s[(0, a)].total_cmp(&s[(0, b)])).unwrap();
        assert_eq!(argmax, 1);

        let zeros = DMatrix::zeros(2, 3);
        let s = score_matrix(&zeros, &bank).unwrap();
        assert!(s.columns(0, 3).iter().all(|v| *v == 0.0));
        assert!(matches!(
            score_matrix(&DMatrix::zeros(2, 4), &bank),
            Err(AggregationError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn huge_dustbin_score_absorbs_mass_with_slack_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = identity_bank(4, 4).with_dustbin_score(1e3);
        let feats = random_matrix(&mut rng, 12, 4, 1.0);
        let s = score_matrix(&feats, &bank).unwrap();
        let a = sinkhorn_assign_with(&s, 3, 1.0, DustbinMarginal::Slack).unwrap();
        assert!(a.dustbin_mass() > 0.99 * 12.0);
        for row in a.weights().row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_marginal_ignores_dustbin_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = random_matrix(&mut rng, 12, 4, 1.0);
        let low = score_matrix(&feats, &identity_bank(4, 4)).unwrap();
        let high = score_matrix(&feats, &identity_bank(4, 4).with_dustbin_score(1e3)).unwrap();
        let a = sinkhorn_assign(&low, 3, 1.0).unwrap();
        let b = sinkhorn_assign(&high, 3, 1.0).unwrap();
        assert!((a.weights() - b.weights()).amax() < 1e-9);
    }

    #[test]
    fn sinkhorn_constant_scores_uniform() {
        for (p, c) in [(1, 2), (5, 3), (7, 9)] {
            let a = sinkhorn_assign(&DMatrix::from_element(p, c, 0.3), 3, 1.0).unwrap();
            assert!(a.weights().iter().all(|w| (w - 1.0 / c as f64).abs() < 1e-12));
        }
        let a = sinkhorn_assign(&DMatrix::from_row_slice(1, 2, &[4.0, 4.0]), 3, 1.0).unwrap();
        assert!((a.weights()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sinkhorn_two_by_two_matches_explicit_scaling() {
        // Linear-domain oracle, one scalar at a time.
        let mut m = [[2.0f64.exp(), 1.0], [1.0, 2.0f64.exp()]];
        let col_target = 2.0 / 2.0;
        for _ in 0..3 {
            for j in 0..2 {
                let s = m[0][j] + m[1][j];
                m[0][j] *= col_target / s;
                m[1][j] *= col_target / s;
            }
            for row in &mut m {
                let s = row[0] + row[1];
                row[0] /= s;
                row[1] /= s;
            }
        }
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let a = sinkhorn_assign(&s, 3, 1.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.weights()[(i, j)] - m[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_input() {
        let s = DMatrix::from_row_slice(1, 2, &[f64::NAN, 0.0]);
        assert_eq!(sinkhorn_assign(&s, 3, 1.0), Err(AggregationError::NonFinite("score matrix")));
        assert!(matches!(
            sinkhorn_assign(&DMatrix::zeros(1, 2), 3, 0.0),
            Err(AggregationError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn aggregate_examples() {
        let bank = ClusterBank::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DMatrix::identity(2, 2), 0.0).unwrap();
        let feats = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let a = AssignmentMatrix::from_weights(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let g = aggregate_global(&feats, &a, &bank).unwrap();
        assert!((g.values()[0] - 0.6).abs() < 1e-12 && (g.values()[1] - 0.8).abs() < 1e-12);

        let dust = AssignmentMatrix::from_weights(DMatrix::from_row_slice(1, 2, &[0.0, 1.0])).unwrap();
        assert_eq!(aggregate_global(&feats, &dust, &bank), Err(AggregationError::ZeroDescriptor));
    }

    #[test]
    fn identical_frames_identical_descriptors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = random_matrix(&mut rng, 60, 8, 1.0);
        let agg = Aggregator::new(fit_cluster_bank(&samples, 4, 4, 1).unwrap());
        let feats = random_matrix(&mut rng, 20, 8, 1.0);
        let a = agg.global_descriptor(&feats).unwrap();
        let b = agg.global_descriptor(&feats.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(crate::geometry::cosine_similarity(a.values(), b.values()).unwrap(), 1.0);
    }

    #[test]
    fn refine_examples() {
        let l0 = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let l1 = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let l2 = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        let r = refine_descriptor(&[l0.clone(), l1.clone(), l2.clone()]).unwrap();
        let n = 3.0f64;
        let expected = [1.0 / n, 0.0, 0.0, 2.0 / n, 2.0 / n, 0.0];
        for (a, b) in r.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // all patches identical gives the P = 1 result
        let rep = |m: &DMatrix<f64>| DMatrix::from_fn(5, 2, |_, j| m[(0, j)]);
        let r5 = refine_descriptor(&[rep(&l0), rep(&l1), rep(&l2)]).unwrap();
        for (a, b) in r5.values().iter().zip(r.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            refine_descriptor(&[DMatrix::zeros(0, 2), DMatrix::zeros(0, 2), DMatrix::zeros(0, 2)]),
            Err(AggregationError::NoPatches)
        );
        assert_eq!(refine_descriptor(&[l0]), Err(AggregationError::LayerCount(1)));
    }

    #[test]
    fn refine_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layers: Vec<DMatrix<f64>> = (0..3).map(|_| random_matrix(&mut rng, 4, 8, 1.0)).collect();
        // Oracle: concatenate per patch, accumulate, divide, normalize.
        let mut acc = vec![0.0; 24];
        for p in 0..4 {
            let mut concat = Vec::new();
            for l in &layers {
                concat.extend((0..8).map(|j| l[(p, j)]));
            }
            for (a, v) in acc.iter_mut().zip(concat) {
                *a += v;
            }
        }
        let mean: Vec<f64> = acc.iter().map(|v| v / 4.0).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = refine_descriptor(&layers).unwrap();
        for (a, b) in r.values().iter().zip(mean) {
            assert!((a - b / norm).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn sinkhorn_rows_sum_to_one_and_positive(
            seed in any::<u64>(), p in 1usize..20, k in 1usize..8, iters in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_matrix(&mut rng, p, k + 1, 5.0);
            let a = sinkhorn_assign(&s, iters, 1.0).unwrap();
            for row in a.weights().row_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|w| *w > 0.0));
            }
        }

        #[test]
        fn sinkhorn_scale_invariance(seed in any::<u64>(), c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_matrix(&mut rng, 6, 4, 3.0);
            let a = sinkhorn_assign(&s, 3, 1.0).unwrap();
            let b = sinkhorn_assign(&(&s * c), 3, c).unwrap();
            prop_assert!((a.weights() - b.weights()).amax() < 1e-9);
        }

        #[test]
        fn patch_permutation_invariance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = ClusterBank::new(random_matrix(&mut rng, 3, 5, 1.0), random_matrix(&mut rng, 5, 2, 1.0), 0.2).unwrap();
            let agg = Aggregator::new(bank);
            let feats = random_matrix(&mut rng, 9, 5, 1.0);
            let mut perm: Vec<usize> = (0..9).collect();
            perm.reverse();
            perm.swap(0, 4);
            let permuted = feats.select_rows(perm.iter());
            let a = agg.assign(&feats).unwrap();
            let b = agg.assign(&permuted).unwrap();
            for (new_row, &old_row) in perm.iter().enumerate() {
                for c in 0..4 {
                    prop_assert!((a.weights()[(old_row, c)] - b.weights()[(new_row, c)]).abs() < 1e-9);
                }
            }
            let ga = agg.global_descriptor(&feats).unwrap();
            let gb = agg.global_descriptor(&permuted).unwrap();
            for (x, y) in ga.values().iter().zip(gb.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((l2_norm(ga.values()) - 1.0).abs() < 1e-6);
        }
    }
}

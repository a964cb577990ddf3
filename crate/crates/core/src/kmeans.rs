//! Lloyd's k-means with k-means++ seeding over row-major data.
//!
//! Used both for the cluster-bank stand-in and for the coarse quantizer of
//! the inverted-file index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct KMeansConfig {
    pub max_iterations: usize,
    /// Stop once `|inertia_prev − inertia| / inertia_prev` drops below this.
    pub rel_tolerance: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            rel_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `k × dim`, row-major.
    pub centers: Vec<f64>,
    pub dim: usize,
    pub k: usize,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeans {
    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.dim..(c + 1) * self.dim]
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Clusters `n = data.len() / dim` rows into `k` groups.
///
/// Panics if `k == 0`, `dim == 0` or there are fewer rows than `k`; callers
/// validate those conditions and surface their own errors.
pub fn kmeans(data: &[f64], dim: usize, k: usize, cfg: KMeansConfig, seed: u64) -> KMeans {
    assert!(dim > 0 && k > 0 && data.len().is_multiple_of(dim));
    let n = data.len() / dim;
    assert!(n >= k, "k-means needs at least k rows");
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centers.extend_from_slice(row(pick));
        let c = &centers[centers.len() - dim..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), c));
        }
    }

    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut prev_inertia = f64::INFINITY;
    let mut inertia;
    let mut iterations = 0;
    for it in 0..cfg.max_iterations.max(1) {
        iterations = it + 1;
        inertia = 0.0;
        for i in 0..n {
            let (c, d) = nearest(row(i), &centers, dim);
            labels[i] = c;
            dists[i] = d;
            inertia += d;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            let dst = &mut centers[c * dim..(c + 1) * dim];
            if counts[c] == 0 {
                // Re-seed an empty cluster at the worst-served point.
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                dst.copy_from_slice(row(far));
                dists[far] = 0.0;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (d, s) in dst.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *d = s * inv;
                }
            }
        }

        if prev_inertia.is_finite() {
            let denom = prev_inertia.max(f64::MIN_POSITIVE);
            if (prev_inertia - inertia).abs() / denom < cfg.rel_tolerance {
                break;
            }
        }
        if inertia == 0.0 {
            break;
        }
        prev_inertia = inertia;
    }

    // Final labels against the final centers.
    inertia = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let (c, d) = nearest(row(i), &centers, dim);
        *label = c;
        inertia += d;
    }

    KMeans {
        centers,
        dim,
        k,
        labels,
        inertia,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_blobs_recover_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = [[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]];
        let mut data = Vec::new();
        let mut sums = [[0.0; 2]; 3];
        for (c, t) in truth.iter().enumerate() {
            for _ in 0..20 {
                let p = [t[0] + rng.random_range(-1.0..1.0), t[1] + rng.random_range(-1.0..1.0)];
                sums[c][0] += p[0];
                sums[c][1] += p[1];
                data.extend_from_slice(&p);
            }
        }
        let km = kmeans(&data, 2, 3, KMeansConfig::default(), 9);
        for s in sums {
            let mean = [s[0] / 20.0, s[1] / 20.0];
            let found = (0..3).any(|c| sq_dist(km.center(c), &mean).sqrt() < 1e-9);
            assert!(found, "mean {mean:?} not recovered");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let data: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
        let a = kmeans(&data, 2, 4, KMeansConfig::default(), 5);
        let b = kmeans(&data, 2, 4, KMeansConfig::default(), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn single_cluster_is_mean() {
        let data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let km = kmeans(&data, 2, 1, KMeansConfig::default(), 0);
        assert!((km.center(0)[0] - 3.0).abs() < 1e-12 && (km.center(0)[1] - 4.0).abs() < 1e-12);
    }
}

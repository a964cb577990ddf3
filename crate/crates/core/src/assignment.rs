//! Optimal one-to-one assignment (Hungarian / Kuhn–Munkres with potentials).
//!
//! `O(n²·m)` shortest augmenting path over a rectangular matrix with
//! `n ≤ m`; wider-than-tall inputs are transposed. Solving the rectangular
//! problem directly gives the same optimum as padding to a square matrix with
//! constant sentinel entries, since every padded row contributes the same
//! constant whatever it is paired with.

use nalgebra::DMatrix;

/// Minimum-cost assignment. Returns `(row, col)` pairs, one per row of the
/// smaller side, sorted by row.
pub fn hungarian_min(cost: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (r, c) = cost.shape();
    if r == 0 || c == 0 {
        return Vec::new();
    }
    if r > c {
        let mut pairs: Vec<(usize, usize)> = solve(&cost.transpose()).into_iter().map(|(a, b)| (b, a)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    solve(cost)
}

/// Maximum-total-similarity assignment.
pub fn hungarian_max(sim: &DMatrix<f64>) -> Vec<(usize, usize)> {
    hungarian_min(&sim.map(|v| -v))
}

/// Rows ≤ columns. 1-based potentials in the classic formulation.
fn solve(cost: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (n, m) = cost.shape();
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // col_match[j] = row (1-based) assigned to column j, 0 = free
    let mut col_match = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        col_match[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = col_match[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[col_match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_match[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_match[j0] = col_match[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| col_match[j] != 0)
        .map(|j| (col_match[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Total of `sim` over the given pairs.
pub fn assignment_total(sim: &DMatrix<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| sim[(i, j)]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive maximum over all injections of the smaller side.
    fn brute_force_max(sim: &DMatrix<f64>) -> f64 {
        let (r, c) = sim.shape();
        let m = if r <= c { sim.clone() } else { sim.transpose() };
        let (n, k) = m.shape();
        fn rec(m: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == m.nrows() {
                *best = best.max(acc);
                return;
            }
            for j in 0..m.ncols() {
                if !used[j] {
                    used[j] = true;
                    rec(m, row + 1, used, acc + m[(row, j)], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::NEG_INFINITY;
        rec(&m, 0, &mut vec![false; k], 0.0, &mut best);
        if n == 0 {
            0.0
        } else {
            best
        }
    }

    fn greedy_total(sim: &DMatrix<f64>) -> f64 {
        let mut cells: Vec<(usize, usize, f64)> = (0..sim.nrows())
            .flat_map(|i| (0..sim.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, sim[(i, j)]))
            .collect();
        cells.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut ru = vec![false; sim.nrows()];
        let mut cu = vec![false; sim.ncols()];
        let mut total = 0.0;
        for (i, j, s) in cells {
            if !ru[i] && !cu[j] {
                ru[i] = true;
                cu[j] = true;
                total += s;
            }
        }
        total
    }

    #[test]
    fn dominant_diagonal() {
        let s = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.1, 0.1, 0.9, 0.1, 0.1, 0.1, 0.9]);
        assert_eq!(hungarian_max(&s), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn matches_brute_force_on_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let s = DMatrix::from_fn(5, 7, |_, _| rng.random_range(-1.0..1.0));
            let pairs = hungarian_max(&s);
            assert_eq!(pairs.len(), 5);
            assert!((assignment_total(&s, &pairs) - brute_force_max(&s)).abs() < 1e-9);
            let t = s.transpose();
            let pairs_t = hungarian_max(&t);
            assert!((assignment_total(&t, &pairs_t) - brute_force_max(&s)).abs() < 1e-9);
        }
    }

    #[test]
    fn never_worse_than_greedy_and_one_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let r = rng.random_range(1..12);
            let c = rng.random_range(1..12);
            let s = DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
            let pairs = hungarian_max(&s);
            assert_eq!(pairs.len(), r.min(c));
            assert!(assignment_total(&s, &pairs) >= greedy_total(&s) - 1e-12);
            let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(rows.len(), pairs.len());
            assert_eq!(cols.len(), pairs.len());
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let s = DMatrix::from_fn(6, 8, |_, _| rng.random_range(-1.0..1.0));
            let row_perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
            let col_perm: Vec<usize> = vec![7, 2, 0, 6, 1, 5, 3, 4];
            let p = DMatrix::from_fn(6, 8, |i, j| s[(row_perm[i], col_perm[j])]);
            let mut mapped: Vec<(usize, usize)> = hungarian_max(&p)
                .into_iter()
                .map(|(i, j)| (row_perm[i], col_perm[j]))
                .collect();
            mapped.sort_unstable();
            assert_eq!(mapped, hungarian_max(&s));
        }
    }

    #[test]
    fn empty_inputs() {
        assert!(hungarian_max(&DMatrix::zeros(0, 3)).is_empty());
    }
}

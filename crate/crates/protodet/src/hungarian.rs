//! Minimum-cost one-to-one assignment (Kuhn–Munkres, O(n³) dual-potential
//! form) on rectangular cost matrices.

use crate::error::{Error, Result};

/// Assigns each of the `K` columns (ground truths) of an `N×K` cost matrix to
/// a distinct row (query), `N ≥ K`, minimizing total cost. Returns
/// `(row, col)` pairs sorted by column.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let n = cost.len();
    let k = cost.first().map_or(0, |r| r.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension("ragged cost matrix".into()));
    }
    if n < k {
        return Err(Error::Contract(format!(
            "need at least as many queries as ground truths, got {n} < {k}"
        )));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in cost matrix".into()));
    }

    // Pad with zero-cost dummy columns to an n×n square; every complete
    // matching uses exactly n−k dummies, so the optimum over real columns is
    // unchanged.
    let dim = n;
    let at = |i: usize, j: usize| -> f64 {
        if j < k {
            cost[i][j]
        } else {
            0.0
        }
    };

    // Dual potentials over rows (u) and columns (v); p[j] = row matched to
    // column j (1-based sentinel at j = 0).
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; dim + 1];
    let mut v = vec![0.0f64; dim + 1];
    let mut p = vec![0usize; dim + 1];
    let mut way = vec![0usize; dim + 1];

    for i in 1..=dim {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; dim + 1];
        let mut used = vec![false; dim + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=dim {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=dim {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=dim)
        .filter(|&j| j <= k && p[j] > 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_by_key(|&(_, j)| j);
    debug_assert_eq!(pairs.len(), k);
    Ok(pairs)
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    #[test]
    fn identity_case() {
        let cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let pairs = hungarian_match(&cost).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&cost, &pairs), 2.0);
    }

    #[test]
    fn crossed_case() {
        // Both permutations enumerated by hand: crossing wins (1 + 2 = 3).
        let cost = vec![vec![4.0, 1.0], vec![2.0, 3.0]];
        let pairs = hungarian_match(&cost).unwrap();
        assert_eq!(pairs, vec![(1, 0), (0, 1)]);
        assert_eq!(assignment_cost(&cost, &pairs), 3.0);
    }

    #[test]
    fn rectangular_leaves_rows_unmatched() {
        let cost = vec![
            vec![5.0],
            vec![1.0],
            vec![3.0],
        ];
        let pairs = hungarian_match(&cost).unwrap();
        assert_eq!(pairs, vec![(1, 0)]);
    }

    #[test]
    fn more_ground_truths_than_queries_is_rejected() {
        let cost = vec![vec![1.0, 2.0, 3.0]];
        assert!(matches!(hungarian_match(&cost), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_cost_is_rejected() {
        let cost = vec![vec![1.0, f64::NAN], vec![2.0, 1.0]];
        assert!(matches!(hungarian_match(&cost), Err(Error::Numeric(_))));
    }

    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        // Enumerate every injective column → row map.
        let n = cost.len();
        let k = cost[0].len();
        fn recurse(cost: &[Vec<f64>], col: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let k = cost[0].len();
            if col == k {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            for row in 0..cost.len() {
                if !used[row] {
                    used[row] = true;
                    recurse(cost, col + 1, used, acc + cost[row][col], best);
                    used[row] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        let mut used = vec![false; n];
        let _ = k;
        recurse(cost, 0, &mut used, 0.0, &mut best);
        best
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = crate::rng::stream_rng(31, crate::rng::stream::INIT);
        for _ in 0..200 {
            let k = rng.random_range(1..6usize);
            let n = k + rng.random_range(0..3usize);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..k).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let pairs = hungarian_match(&cost).unwrap();
            assert_eq!(pairs.len(), k);
            let mut rows: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
            rows.sort_unstable();
            rows.dedup();
            assert_eq!(rows.len(), k, "assignment reused a row");
            let total = assignment_cost(&cost, &pairs);
            let best = brute_force_min(&cost);
            assert_eq!(total, best, "solver {total} vs brute force {best}");
        }
    }
}

//! K-Means and DBSCAN over embedding points.
//!
//! Both algorithms are deterministic given their inputs: K-Means from the
//! seed, DBSCAN from the input order (clusters are numbered by their first
//! core point, border points join the first cluster that reaches them).

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

const MAX_LLOYD_ITERS: usize = 100;

/// Output of [`kmeans`].
#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `k` centroids, unnormalized (callers decide whether to re-normalize).
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    /// Final within-cluster sum of squared distances.
    pub inertia: f64,
    /// Inertia recorded after every assignment pass, for monotonicity checks.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, best_d)
}

/// Seeded k-means++ initialization.
fn init_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm from a seeded k-means++ start.
///
/// Runs until the assignment reaches a fixpoint or `MAX_LLOYD_ITERS`. An
/// empty cluster is re-seeded at the point currently farthest from its
/// assigned centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Parameter("kmeans needs k >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::Parameter(format!(
            "kmeans needs at least k={k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimension("kmeans points have mixed dimensions".into()));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(points, k, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut inertia_trace = Vec::new();

    for _ in 0..MAX_LLOYD_ITERS {
        // Assignment pass.
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            inertia += d;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        let first_pass = inertia_trace.is_empty();
        inertia_trace.push(inertia);
        if !changed && !first_pass {
            break;
        }

        // Update pass.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut reseeded: Vec<usize> = Vec::new();
        for j in 0..k {
            if counts[j] == 0 {
                // Re-seed at the farthest point not already claimed this pass.
                let far = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !reseeded.contains(i))
                    .max_by(|(ia, a), (ib, b)| {
                        let da = sq_dist(a, &centroids[assignments[*ia]]);
                        let db = sq_dist(b, &centroids[assignments[*ib]]);
                        da.partial_cmp(&db).unwrap().then(ib.cmp(ia))
                    })
                    .map(|(i, _)| i)
                    .expect("points nonempty");
                reseeded.push(far);
                centroids[j] = points[far].clone();
            } else {
                for (c, s) in centroids[j].iter_mut().zip(&sums[j]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
    }

    // Final assignment against the last centroids.
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, d) = nearest(p, &centroids);
        assignments[i] = j;
        inertia += d;
    }
    inertia_trace.push(inertia);

    Ok(KMeansResult { centroids, assignments, inertia, inertia_trace })
}

/// Noise label produced by [`dbscan`].
pub const NOISE: i64 = -1;

/// Density-based clustering under Euclidean distance.
///
/// Returns one label per point; `NOISE` marks points in no cluster. A point
/// is core when its closed eps-neighborhood holds at least `min_pts` points.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<Vec<i64>> {
    if eps <= 0.0 {
        return Err(Error::Parameter("dbscan eps must be positive".into()));
    }
    if min_pts == 0 {
        return Err(Error::Parameter("dbscan min_pts must be >= 1".into()));
    }
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        (0..n).filter(|&j| sq_dist(&points[i], &points[j]) <= eps2).collect()
    };

    const UNVISITED: i64 = -2;
    let mut labels = vec![UNVISITED; n];
    let mut cluster = 0i64;

    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        let seed_neighbors = neighbors(i);
        if seed_neighbors.len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = cluster;
        let mut queue: std::collections::VecDeque<usize> =
            seed_neighbors.into_iter().filter(|&j| j != i).collect();
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = cluster; // border point
                continue;
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = cluster;
            let nj = neighbors(j);
            if nj.len() >= min_pts {
                queue.extend(nj.into_iter().filter(|&q| labels[q] == UNVISITED || labels[q] == NOISE));
            }
        }
        cluster += 1;
    }
    Ok(labels)
}

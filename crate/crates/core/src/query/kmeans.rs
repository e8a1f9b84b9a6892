//! Weighted Lloyd k-means with weighted k-means++ seeding.
//!
//! Lloyd minimizes `Σ_k Σ_{x∈S_k} w(x)·‖F(x) − μ_k‖²` with weighted-mean
//! centroids. The size-normalized variant, which divides each cluster's sum
//! by `|S_k|`, is not monotone under Lloyd updates; it is reported alongside
//! for diagnostics only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to clustering weights.
pub const MIN_WEIGHT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// Cluster index of each input point, in input order.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub weighted_objective: f64,
    pub size_normalized_objective: f64,
    /// Weighted objective after every Lloyd iteration.
    pub history: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Point indices of cluster `k`, ascending.
    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == k)
            .collect()
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Weighted-mean centroids of a partition. Empty clusters get `None`.
///
/// Accumulated relative to each cluster's first member, so a singleton
/// cluster's centroid is exactly its point.
pub fn weighted_centroids(
    points: &[Vec<f64>],
    weights: &[f64],
    assignments: &[usize],
    k: usize,
) -> Vec<Option<Vec<f64>>> {
    let d = points.first().map_or(0, Vec::len);
    let mut anchor: Vec<Option<usize>> = vec![None; k];
    let mut sums = vec![vec![0.0; d]; k];
    let mut mass = vec![0.0; k];
    for (i, ((p, &w), &a)) in points.iter().zip(weights).zip(assignments).enumerate() {
        let r = *anchor[a].get_or_insert(i);
        mass[a] += w;
        for ((s, x), x0) in sums[a].iter_mut().zip(p).zip(&points[r]) {
            *s += w * (x - x0);
        }
    }
    (0..k)
        .map(|c| {
            let r = anchor[c]?;
            (mass[c] > 0.0).then(|| {
                points[r]
                    .iter()
                    .zip(&sums[c])
                    .map(|(x0, s)| x0 + s / mass[c])
                    .collect()
            })
        })
        .collect()
}

/// Weighted within-cluster sum of squares of a partition, using its own
/// weighted-mean centroids.
pub fn weighted_objective(points: &[Vec<f64>], weights: &[f64], assignments: &[usize], k: usize) -> f64 {
    let centroids = weighted_centroids(points, weights, assignments, k);
    points
        .iter()
        .zip(weights)
        .zip(assignments)
        .map(|((p, w), &a)| centroids[a].as_ref().map_or(0.0, |c| w * sq_dist(p, c)))
        .sum()
}

/// Like [`weighted_objective`] with every cluster's term divided by its size.
pub fn size_normalized_objective(points: &[Vec<f64>], weights: &[f64], assignments: &[usize], k: usize) -> f64 {
    let centroids = weighted_centroids(points, weights, assignments, k);
    let mut per_cluster = vec![0.0; k];
    let mut sizes = vec![0usize; k];
    for ((p, w), &a) in points.iter().zip(weights).zip(assignments) {
        sizes[a] += 1;
        if let Some(c) = &centroids[a] {
            per_cluster[a] += w * sq_dist(p, c);
        }
    }
    per_cluster
        .iter()
        .zip(&sizes)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| s / n as f64)
        .sum()
}

fn validate(points: &[Vec<f64>], weights: &[f64], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Usage("k-means needs K >= 1".into()));
    }
    if k > points.len() {
        return Err(Error::Usage(format!("K = {k} exceeds the {} points", points.len())));
    }
    if weights.len() != points.len() {
        return Err(Error::Usage(format!(
            "{} weights for {} points",
            weights.len(),
            points.len()
        )));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Dimension("points have differing dimensions".into()));
    }
    Ok(())
}

/// Floors weights at [`MIN_WEIGHT`] and rescales so the largest is 1.
///
/// Equal weights therefore become exactly 1.0, which makes a uniformly
/// weighted run bit-identical to an unweighted one.
fn normalized_weights(weights: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = weights
        .iter()
        .map(|&w| if w.is_nan() { MIN_WEIGHT } else { w.max(MIN_WEIGHT) })
        .collect();
    let top = floored.iter().cloned().fold(MIN_WEIGHT, f64::max);
    floored.into_iter().map(|w| w / top).collect()
}

/// Draws index `i` with probability `mass[i] / Σ mass`.
fn sample_index(rng: &mut ChaCha8Rng, mass: &[f64]) -> Option<usize> {
    let total: f64 = mass.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &m) in mass.iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        acc += m;
        last = Some(i);
        if acc > target {
            return Some(i);
        }
    }
    last
}

/// Weighted k-means++: first centroid ∝ w, then ∝ w·D².
pub fn plus_plus_init(points: &[Vec<f64>], weights: &[f64], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    validate(points, weights, k)?;
    let w = normalized_weights(weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; points.len()];
    let first = sample_index(&mut rng, &w).unwrap_or(0);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let mass: Vec<f64> = nearest
            .iter()
            .zip(&w)
            .zip(&chosen)
            .map(|((d, w), &c)| if c { 0.0 } else { w * d })
            .collect();
        let next = sample_index(&mut rng, &mass)
            .unwrap_or_else(|| chosen.iter().position(|&c| !c).expect("k <= n"));
        chosen[next] = true;
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(sq_dist(p, &points[next]));
        }
        centroids.push(points[next].clone());
    }
    Ok(centroids)
}

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd iterations from explicit initial centroids.
pub fn weighted_kmeans_from(
    points: &[Vec<f64>],
    weights: &[f64],
    init: Vec<Vec<f64>>,
    cfg: &KMeansConfig,
) -> Result<ClusterResult> {
    let k = init.len();
    validate(points, weights, k)?;
    let w = normalized_weights(weights);
    let scale = weights
        .iter()
        .map(|&x| if x.is_nan() { MIN_WEIGHT } else { x.max(MIN_WEIGHT) })
        .fold(MIN_WEIGHT, f64::max);
    let n = points.len();
    let mut centroids = init;
    let mut assignments = vec![0usize; n];
    let mut history = Vec::new();

    for _ in 0..cfg.max_iters.max(1) {
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (a, d) = nearest_centroid(p, &centroids);
            assignments[i] = a;
            dists[i] = d;
        }
        repair_empty_clusters(points, &w, &mut assignments, &mut dists, &mut centroids);

        let updated = weighted_centroids(points, &w, &assignments, k);
        let mut shift: f64 = 0.0;
        for (c, u) in centroids.iter_mut().zip(updated) {
            let u = u.expect("clusters are non-empty after repair");
            shift = shift.max(sq_dist(c, &u).sqrt());
            *c = u;
        }
        let objective: f64 = points
            .iter()
            .zip(&w)
            .zip(&assignments)
            .map(|((p, w), &a)| w * sq_dist(p, &centroids[a]))
            .sum();
        history.push(objective * scale);
        if shift < cfg.tol {
            break;
        }
    }

    let floored: Vec<f64> = w.iter().map(|v| v * scale).collect();
    Ok(ClusterResult {
        weighted_objective: weighted_objective(points, &floored, &assignments, k),
        size_normalized_objective: size_normalized_objective(points, &floored, &assignments, k),
        assignments,
        centroids,
        history,
    })
}

/// Gives each empty cluster the point with the largest weighted distance to
/// its current centroid, taken from a cluster that can spare it.
fn repair_empty_clusters(
    points: &[Vec<f64>],
    w: &[f64],
    assignments: &mut [usize],
    dists: &mut [f64],
    centroids: &mut [Vec<f64>],
) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut donor = None;
        let mut best = f64::NEG_INFINITY;
        for i in 0..points.len() {
            if sizes[assignments[i]] > 1 && w[i] * dists[i] > best {
                best = w[i] * dists[i];
                donor = Some(i);
            }
        }
        let i = donor.expect("K <= n leaves a cluster with two or more members");
        centroids[empty] = points[i].clone();
        assignments[i] = empty;
        dists[i] = 0.0;
    }
}

/// Weighted k-means seeded by weighted k-means++.
pub fn weighted_kmeans(
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<ClusterResult> {
    let init = plus_plus_init(points, weights, k, seed)?;
    weighted_kmeans_from(points, weights, init, cfg)
}

/// Restarts Lloyd from every K-subset of the points and keeps the lowest
/// weighted objective (earliest subset on ties). Exponential; meant for
/// small instances.
pub fn weighted_kmeans_exhaustive(
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    cfg: &KMeansConfig,
) -> Result<ClusterResult> {
    validate(points, weights, k)?;
    let n = points.len();
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best: Option<ClusterResult> = None;
    loop {
        let init = idx.iter().map(|&i| points[i].clone()).collect();
        let run = weighted_kmeans_from(points, weights, init, cfg)?;
        if best.as_ref().is_none_or(|b| run.weighted_objective < b.weighted_objective) {
            best = Some(run);
        }
        // Next combination in lexicographic order.
        let Some(pos) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            break;
        };
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(best.expect("at least one subset"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    /// Brute-force objective, written independently of the library path.
    /// Labels are canonicalized first so a partition has one value.
    fn oracle_objective(points: &[Vec<f64>], w: &[f64], a: &[usize], k: usize) -> Option<f64> {
        let mut relabel = vec![usize::MAX; k];
        let mut next = 0;
        let a: Vec<usize> = a
            .iter()
            .map(|&c| {
                if relabel[c] == usize::MAX {
                    relabel[c] = next;
                    next += 1;
                }
                relabel[c]
            })
            .collect();
        let d = points[0].len();
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<usize> = (0..points.len()).filter(|&i| a[i] == c).collect();
            if members.is_empty() {
                return None;
            }
            let m: f64 = members.iter().map(|&i| w[i]).sum();
            let mu: Vec<f64> = (0..d)
                .map(|j| members.iter().map(|&i| w[i] * points[i][j]).sum::<f64>() / m)
                .collect();
            for &i in &members {
                total += w[i] * points[i].iter().zip(&mu).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            }
        }
        Some(total)
    }

    fn brute_force_best(points: &[Vec<f64>], w: &[f64], k: usize) -> f64 {
        let n = points.len();
        let mut a = vec![0usize; n];
        let mut best = f64::INFINITY;
        loop {
            if let Some(v) = oracle_objective(points, w, &a, k) {
                best = best.min(v);
            }
            let mut i = 0;
            while i < n {
                a[i] += 1;
                if a[i] < k {
                    break;
                }
                a[i] = 0;
                i += 1;
            }
            if i == n {
                return best;
            }
        }
    }

    #[test]
    fn rejects_bad_k() {
        let pts = vec![vec![0.0], vec![1.0]];
        let cfg = KMeansConfig::default();
        assert!(matches!(weighted_kmeans(&pts, &[1.0, 1.0], 0, 0, &cfg), Err(Error::Usage(_))));
        assert!(matches!(weighted_kmeans(&pts, &[1.0, 1.0], 3, 0, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = rand_points(&mut rng, 7, 3);
        let w: Vec<f64> = (0..7).map(|_| rng.random_range(0.1..1.0)).collect();
        let r = weighted_kmeans(&pts, &w, 7, 3, &KMeansConfig::default()).unwrap();
        assert_eq!(r.weighted_objective, 0.0);
        let mut seen = r.assignments.clone();
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn equal_weights_match_unweighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = rand_points(&mut rng, 40, 4);
        let cfg = KMeansConfig::default();
        for seed in 0..5 {
            let a = weighted_kmeans(&pts, &vec![1.0; 40], 5, seed, &cfg).unwrap();
            let b = weighted_kmeans(&pts, &vec![0.37; 40], 5, seed, &cfg).unwrap();
            assert_eq!(a.assignments, b.assignments);
            assert_eq!(a.centroids, b.centroids);
        }
    }

    #[test]
    fn separates_two_groups_on_a_line() {
        let pts: Vec<Vec<f64>> = [0.0, 0.1, 0.2, 10.0, 10.1, 10.2].iter().map(|&x| vec![x]).collect();
        let w = [0.3, 0.9, 0.5, 0.1, 0.7, 0.2];
        let best = brute_force_best(&pts, &w, 2);
        for seed in 0..10 {
            let r = weighted_kmeans(&pts, &w, 2, seed, &KMeansConfig::default()).unwrap();
            assert_eq!(r.assignments[0], r.assignments[1]);
            assert_eq!(r.assignments[1], r.assignments[2]);
            assert_eq!(r.assignments[3], r.assignments[4]);
            assert_eq!(r.assignments[4], r.assignments[5]);
            assert_ne!(r.assignments[0], r.assignments[3]);
            assert_eq!(oracle_objective(&pts, &w, &r.assignments, 2), Some(best));
        }
    }

    #[test]
    fn exhaustive_restarts_reach_brute_force_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cfg = KMeansConfig::default();
        for _ in 0..60 {
            let n = rng.random_range(2..=8);
            let k = rng.random_range(1..=3.min(n));
            let d = rng.random_range(1..=3);
            let pts = rand_points(&mut rng, n, d);
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let r = weighted_kmeans_exhaustive(&pts, &w, k, &cfg).unwrap();
            assert_eq!(oracle_objective(&pts, &w, &r.assignments, k), Some(brute_force_best(&pts, &w, k)));
        }
    }

    #[test]
    fn objective_history_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..30 {
            let pts = rand_points(&mut rng, 60, 2);
            let w: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
            let r = weighted_kmeans(&pts, &w, 6, seed, &KMeansConfig::default()).unwrap();
            for pair in r.history.windows(2) {
                assert!(pair[1] <= pair[0], "seed {seed}: {:?}", r.history);
            }
            let last = *r.history.last().unwrap();
            assert!((last - r.weighted_objective).abs() <= 1e-12 * last.max(1.0));
        }
    }

    #[test]
    fn duplicate_points_keep_clusters_non_empty() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let r = weighted_kmeans(&pts, &[1.0; 5], 3, 0, &KMeansConfig::default()).unwrap();
        for k in 0..3 {
            assert!(!r.members(k).is_empty());
        }
    }

    #[test]
    fn size_normalized_objective_divides_by_cluster_size() {
        let pts: Vec<Vec<f64>> = [0.0, 2.0, 10.0].iter().map(|&x| vec![x]).collect();
        let w = [1.0, 1.0, 1.0];
        let a = [0, 0, 1];
        assert_eq!(weighted_objective(&pts, &w, &a, 2), 2.0);
        assert_eq!(size_normalized_objective(&pts, &w, &a, 2), 1.0);
    }
}

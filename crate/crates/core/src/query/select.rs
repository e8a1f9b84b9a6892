//! Batch selection: uncertainty-weighted clustering and the baselines it is
//! compared against.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::{sq_dist, weighted_kmeans, ClusterResult, KMeansConfig, MIN_WEIGHT};
use crate::error::{Error, Result};

/// Cached valuation of one training sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: usize,
    /// Cosine between the class prototypes.
    pub uncertainty: f64,
    pub entropy: f64,
    /// Pooled encoder feature.
    pub image_feature: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Uncertainty-weighted k-means, centroid-nearest member per cluster.
    #[serde(rename = "ours")]
    Ours,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "entropy")]
    Entropy,
    /// k-center greedy from the labeled set.
    #[serde(rename = "coreset")]
    Coreset,
    /// Top-B by uncertainty, no clustering.
    #[serde(rename = "uncertainty_topb")]
    UncertaintyTopB,
    /// Unweighted k-means, centroid-nearest member per cluster.
    #[serde(rename = "pure_kmeans")]
    PureKmeans,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Ours,
        Strategy::Random,
        Strategy::Entropy,
        Strategy::Coreset,
        Strategy::UncertaintyTopB,
        Strategy::PureKmeans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ours => "ours",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Coreset => "coreset",
            Strategy::UncertaintyTopB => "uncertainty_topb",
            Strategy::PureKmeans => "pure_kmeans",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Strategy::ALL.iter().map(|s| s.name()).collect();
                Error::Usage(format!("unknown strategy {s:?} (known: {})", known.join(", ")))
            })
    }
}

/// JSON record of one selection step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub round: usize,
    pub strategy: Strategy,
    pub selected_ids: Vec<usize>,
    pub per_sample: Vec<SampleSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: usize,
    pub uncertainty: f64,
    pub entropy: f64,
}

impl SelectionRecord {
    pub fn new(round: usize, strategy: Strategy, selected_ids: Vec<usize>, scores: &[SampleScore]) -> Self {
        SelectionRecord {
            round,
            strategy,
            selected_ids,
            per_sample: scores
                .iter()
                .map(|s| SampleSummary {
                    id: s.sample_id,
                    uncertainty: s.uncertainty,
                    entropy: s.entropy,
                })
                .collect(),
        }
    }
}

fn sorted_by_id(scores: &[SampleScore]) -> Vec<&SampleScore> {
    let mut v: Vec<&SampleScore> = scores.iter().collect();
    v.sort_by_key(|s| s.sample_id);
    v
}

fn all_ids(pool: &[&SampleScore]) -> Vec<usize> {
    pool.iter().map(|s| s.sample_id).collect()
}

/// From every cluster, the member closest to its centroid (lowest id on
/// ties). `pool` must be in the order the clustering saw the points.
pub fn centroid_nearest(pool: &[&SampleScore], clusters: &ClusterResult) -> Vec<usize> {
    let mut picked: Vec<usize> = (0..clusters.k())
        .filter_map(|k| {
            clusters
                .members(k)
                .into_iter()
                .map(|i| (sq_dist(&pool[i].image_feature, &clusters.centroids[k]), pool[i].sample_id))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, id)| id)
        })
        .collect();
    picked.sort_unstable();
    picked
}

fn cluster_select(pool: &[SampleScore], budget: usize, seed: u64, weighted: bool) -> Result<Vec<usize>> {
    if budget == 0 {
        return Err(Error::Usage("selection budget must be >= 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::Usage("cannot select from an empty pool".into()));
    }
    let pool = sorted_by_id(pool);
    if budget >= pool.len() {
        return Ok(all_ids(&pool));
    }
    let points: Vec<Vec<f64>> = pool.iter().map(|s| s.image_feature.clone()).collect();
    let weights: Vec<f64> = if weighted {
        pool.iter().map(|s| s.uncertainty.max(MIN_WEIGHT)).collect()
    } else {
        vec![1.0; pool.len()]
    };
    let clusters = weighted_kmeans(&points, &weights, budget, seed, &KMeansConfig::default())?;
    Ok(centroid_nearest(&pool, &clusters))
}

/// Uncertainty-weighted clustering with `K = budget`; one centroid-nearest
/// sample per cluster. Returns ids ascending.
pub fn select_batch_ours(pool: &[SampleScore], budget: usize, seed: u64) -> Result<Vec<usize>> {
    cluster_select(pool, budget, seed, true)
}

/// Highest `key` first, lowest id on ties; result ascending by id.
fn top_by(pool: &[SampleScore], budget: usize, key: impl Fn(&SampleScore) -> f64) -> Vec<usize> {
    let mut v = sorted_by_id(pool);
    v.sort_by(|a, b| {
        key(b)
            .partial_cmp(&key(a))
            .unwrap_or(Ordering::Equal)
            .then(a.sample_id.cmp(&b.sample_id))
    });
    let mut ids: Vec<usize> = v.into_iter().take(budget).map(|s| s.sample_id).collect();
    ids.sort_unstable();
    ids
}

/// Farthest-first traversal over image features starting from the labeled
/// set.
pub fn k_center_greedy(pool: &[SampleScore], labeled: &[SampleScore], budget: usize, seed: u64) -> Vec<usize> {
    let pool = sorted_by_id(pool);
    let mut min_dist: Vec<f64> = pool
        .iter()
        .map(|s| {
            labeled
                .iter()
                .map(|l| sq_dist(&s.image_feature, &l.image_feature))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut picked = Vec::with_capacity(budget);
    let mut taken = vec![false; pool.len()];
    if labeled.is_empty() && !pool.is_empty() {
        let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..pool.len());
        taken[first] = true;
        picked.push(first);
        for (d, s) in min_dist.iter_mut().zip(&pool) {
            *d = sq_dist(&s.image_feature, &pool[first].image_feature);
        }
    }
    while picked.len() < budget.min(pool.len()) {
        let mut best: Option<usize> = None;
        for i in 0..pool.len() {
            if !taken[i] && best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("pool larger than picked");
        taken[b] = true;
        picked.push(b);
        for (d, s) in min_dist.iter_mut().zip(&pool) {
            *d = d.min(sq_dist(&s.image_feature, &pool[b].image_feature));
        }
    }
    let mut ids: Vec<usize> = picked.into_iter().map(|i| pool[i].sample_id).collect();
    ids.sort_unstable();
    ids
}

/// Dispatches any [`Strategy`]. `labeled` is only consulted by coreset.
pub fn select_batch(
    strategy: Strategy,
    pool: &[SampleScore],
    labeled: &[SampleScore],
    budget: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if budget == 0 {
        return Err(Error::Usage("selection budget must be >= 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::Usage("cannot select from an empty pool".into()));
    }
    if budget >= pool.len() {
        return Ok(all_ids(&sorted_by_id(pool)));
    }
    Ok(match strategy {
        Strategy::Ours => cluster_select(pool, budget, seed, true)?,
        Strategy::PureKmeans => cluster_select(pool, budget, seed, false)?,
        Strategy::Random => {
            let mut ids = all_ids(&sorted_by_id(pool));
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            ids.truncate(budget);
            ids.sort_unstable();
            ids
        }
        Strategy::Entropy => top_by(pool, budget, |s| s.entropy),
        Strategy::UncertaintyTopB => top_by(pool, budget, |s| s.uncertainty),
        Strategy::Coreset => k_center_greedy(pool, labeled, budget, seed),
    })
}

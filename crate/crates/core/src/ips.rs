//! Initial pool selection and the pool bookkeeping shared with the AL loop.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{self, sq_dist, Clustering};
use crate::seeding;
use crate::store::{EmbeddingDataset, EmbeddingMatrix};

/// Disjoint labeled/unlabeled partition of the train indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolState {
    /// In acquisition order.
    labeled: Vec<usize>,
    /// Ascending.
    unlabeled: Vec<usize>,
    is_labeled: Vec<bool>,
    cycle: usize,
}

impl PoolState {
    pub fn new(num_train: usize, initial: &[usize]) -> Result<Self> {
        let mut is_labeled = vec![false; num_train];
        for &i in initial {
            if i >= num_train {
                return Err(Error::validation("labeled", format!("index {i} out of range")));
            }
            if is_labeled[i] {
                return Err(Error::validation("labeled", format!("duplicate index {i}")));
            }
            is_labeled[i] = true;
        }
        let unlabeled = (0..num_train).filter(|&i| !is_labeled[i]).collect();
        Ok(PoolState {
            labeled: initial.to_vec(),
            unlabeled,
            is_labeled,
            cycle: 0,
        })
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.is_labeled[i]
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.is_labeled
    }

    pub fn cycle(&self) -> usize {
        self.cycle
    }

    pub fn num_train(&self) -> usize {
        self.is_labeled.len()
    }

    /// Moves `batch` from the unlabeled to the labeled pool and advances the
    /// cycle counter.
    pub fn label_batch(&mut self, batch: &[usize]) -> Result<()> {
        let mut sorted = batch.to_vec();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(Error::validation("batch", format!("duplicate index {}", w[0])));
            }
        }
        for &i in &sorted {
            if i >= self.num_train() || self.is_labeled[i] {
                return Err(Error::validation("batch", format!("index {i} is not unlabeled")));
            }
        }
        for &i in batch {
            self.is_labeled[i] = true;
            self.labeled.push(i);
        }
        self.unlabeled.retain(|&i| !self.is_labeled[i]);
        self.cycle += 1;
        Ok(())
    }

    /// Disjointness and coverage of the partition.
    pub fn check_partition(&self) -> Result<()> {
        let n = self.num_train();
        if self.labeled.len() + self.unlabeled.len() != n {
            return Err(Error::validation("pool", "labeled ∪ unlabeled does not cover the train set"));
        }
        let mut count = vec![0u8; n];
        for &i in self.labeled.iter().chain(&self.unlabeled) {
            count[i] += 1;
        }
        if count.iter().any(|&c| c != 1) {
            return Err(Error::validation("pool", "labeled and unlabeled overlap"));
        }
        if self.labeled.iter().any(|&i| !self.is_labeled[i]) || self.unlabeled.iter().any(|&i| self.is_labeled[i]) {
            return Err(Error::validation("pool", "mask out of sync"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IpsStrategy {
    Random,
    #[serde(rename = "coreset")]
    CoreSet,
    #[serde(rename = "typiclust")]
    TypiClust,
}

impl IpsStrategy {
    pub const ALL: [IpsStrategy; 3] = [IpsStrategy::Random, IpsStrategy::CoreSet, IpsStrategy::TypiClust];

    pub fn name(self) -> &'static str {
        match self {
            IpsStrategy::Random => "random",
            IpsStrategy::CoreSet => "coreset",
            IpsStrategy::TypiClust => "typiclust",
        }
    }
}

impl fmt::Display for IpsStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IpsStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IpsStrategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

pub const DEFAULT_TYPICLUST_KNN: usize = 20;
pub const DEFAULT_TYPICLUST_MAX_CLUSTERS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpsConfig {
    pub strategy: IpsStrategy,
    pub k0: usize,
    pub seed: u64,
    pub typiclust_knn: usize,
    pub typiclust_max_clusters: usize,
}

impl IpsConfig {
    pub fn new(strategy: IpsStrategy, k0: usize, seed: u64) -> Self {
        IpsConfig {
            strategy,
            k0,
            seed,
            typiclust_knn: DEFAULT_TYPICLUST_KNN,
            typiclust_max_clusters: DEFAULT_TYPICLUST_MAX_CLUSTERS,
        }
    }
}

/// Selects the initial labeled pool. The RNG stream depends only on
/// `(seed, strategy)`, so every query strategy sharing a seed and IPS starts
/// from the same pool.
pub fn select_initial(dataset: &EmbeddingDataset, cfg: &IpsConfig) -> Result<Vec<usize>> {
    let n = dataset.num_train();
    if cfg.k0 < 1 || cfg.k0 > n {
        return Err(Error::Config(format!("k0 = {} must lie in [1, {n}]", cfg.k0)));
    }
    if cfg.typiclust_knn == 0 || cfg.typiclust_max_clusters == 0 {
        return Err(Error::Config("typiclust parameters must be positive".into()));
    }
    let mut rng = seeding::stream(cfg.seed, cfg.strategy.name(), "ips");
    let picks = match cfg.strategy {
        IpsStrategy::Random => rand::seq::index::sample(&mut rng, n, cfg.k0).into_vec(),
        IpsStrategy::CoreSet => {
            let all: Vec<usize> = (0..n).collect();
            kcenter_greedy(&dataset.train, &all, &[], cfg.k0, &mut rng)?
        }
        IpsStrategy::TypiClust => {
            let none = vec![false; n];
            typiclust_select(
                &dataset.train,
                &none,
                cfg.k0,
                cfg.typiclust_knn,
                cfg.typiclust_max_clusters,
                &mut rng,
            )
            .picks
        }
    };
    Ok(picks)
}

/// Greedy k-center: repeatedly takes the candidate farthest (Euclidean) from
/// its nearest center. With no initial centers the first pick is drawn
/// uniformly from the candidates and counts toward `k`. Ties go to the lowest
/// index.
pub fn kcenter_greedy<R: Rng>(
    features: &EmbeddingMatrix,
    candidates: &[usize],
    initial_centers: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Strategy {
            strategy: "coreset".into(),
            message: "empty candidate set".into(),
        });
    }
    if k > candidates.len() {
        return Err(Error::Strategy {
            strategy: "coreset".into(),
            message: format!("k = {k} exceeds {} candidates", candidates.len()),
        });
    }
    let mut picks = Vec::with_capacity(k);
    let mut chosen = vec![false; candidates.len()];
    let mut nearest = vec![f64::INFINITY; candidates.len()];

    let absorb = |center: usize, nearest: &mut Vec<f64>| {
        let c = features.row(center);
        nearest.par_iter_mut().zip(candidates.par_iter()).for_each(|(d, &i)| {
            let nd = sq_dist(features.row(i), c);
            if nd < *d {
                *d = nd;
            }
        });
    };
    for &c in initial_centers {
        absorb(c, &mut nearest);
    }
    if initial_centers.is_empty() && k > 0 {
        let first = rng.random_range(0..candidates.len());
        chosen[first] = true;
        picks.push(candidates[first]);
        absorb(candidates[first], &mut nearest);
    }
    while picks.len() < k {
        // Candidates are processed in ascending order of their position; the
        // lowest dataset index wins ties when candidates are sorted.
        let mut best: Option<usize> = None;
        for pos in 0..candidates.len() {
            if chosen[pos] {
                continue;
            }
            best = match best {
                None => Some(pos),
                Some(b) => {
                    let better = nearest[pos] > nearest[b]
                        || (nearest[pos] == nearest[b] && candidates[pos] < candidates[b]);
                    Some(if better { pos } else { b })
                }
            };
        }
        let pos = best.expect("k ≤ candidates");
        chosen[pos] = true;
        picks.push(candidates[pos]);
        absorb(candidates[pos], &mut nearest);
    }
    Ok(picks)
}

/// Typicality of each member of `neighborhood`: the inverse of the mean
/// Euclidean distance to its `K` nearest other members, with
/// `K = min(knn, |neighborhood| - 1)`. Coincident neighbors give `+∞`.
pub fn typicality(features: &EmbeddingMatrix, neighborhood: &[usize], knn: usize) -> Result<Vec<f64>> {
    if neighborhood.len() < 2 {
        return Err(Error::validation("neighborhood", "typicality needs at least two points"));
    }
    if knn == 0 {
        return Err(Error::Config("typicality K must be positive".into()));
    }
    let k = knn.min(neighborhood.len() - 1);
    Ok(neighborhood
        .par_iter()
        .enumerate()
        .map(|(a, &i)| {
            let x = features.row(i);
            let mut dists: Vec<f64> = neighborhood
                .iter()
                .enumerate()
                .filter(|&(b, _)| b != a)
                .map(|(_, &j)| sq_dist(x, features.row(j)).sqrt())
                .collect();
            dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            let mut nearest = dists[..k].to_vec();
            nearest.sort_unstable_by(f64::total_cmp);
            let mean = nearest.iter().sum::<f64>() / k as f64;
            if mean == 0.0 {
                f64::INFINITY
            } else {
                1.0 / mean
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct TypiclustSelection {
    pub picks: Vec<usize>,
    pub clustering: Clustering,
}

/// TypiClust selection of `b` unlabeled points.
///
/// Clusters all rows with k = min(|L| + b, max_clusters); visits clusters
/// without labeled members first, then the rest, each group by size
/// descending (ties by cluster id), taking each visited cluster's most typical
/// unlabeled member. Passes repeat round-robin until `b` points are picked.
pub fn typiclust_select<R: Rng>(
    features: &EmbeddingMatrix,
    is_labeled: &[bool],
    b: usize,
    knn: usize,
    max_clusters: usize,
    rng: &mut R,
) -> TypiclustSelection {
    let n = features.rows();
    let num_labeled = is_labeled.iter().filter(|&&l| l).count();
    let k = (num_labeled + b).min(max_clusters).min(n).max(1);
    let all: Vec<usize> = (0..n).collect();
    let clustering = kmeans::kmeans(features, &all, k, rng);
    let members = clustering.members();

    let mut order: Vec<usize> = (0..clustering.k).filter(|&c| !members[c].is_empty()).collect();
    let covered: Vec<bool> = members.iter().map(|m| m.iter().any(|&i| is_labeled[i])).collect();
    order.sort_by_key(|&c| (covered[c], std::cmp::Reverse(members[c].len()), c));

    let mut ranked: Vec<Option<Vec<usize>>> = vec![None; clustering.k];
    let mut cursor = vec![0usize; clustering.k];
    let mut picks = Vec::with_capacity(b);
    while picks.len() < b {
        let before = picks.len();
        for &c in &order {
            if picks.len() == b {
                break;
            }
            let list = ranked[c].get_or_insert_with(|| rank_by_typicality(features, &members[c], is_labeled, knn));
            if cursor[c] < list.len() {
                picks.push(list[cursor[c]]);
                cursor[c] += 1;
            }
        }
        if picks.len() == before {
            break;
        }
    }
    TypiclustSelection { picks, clustering }
}

// Unlabeled members of a cluster, most typical first (ties by index).
// Typicality is measured against every member, labeled or not.
fn rank_by_typicality(features: &EmbeddingMatrix, members: &[usize], is_labeled: &[bool], knn: usize) -> Vec<usize> {
    let scores = if members.len() >= 2 {
        typicality(features, members, knn).expect("≥ 2 members")
    } else {
        vec![f64::INFINITY; members.len()]
    };
    let mut cands: Vec<(usize, f64)> = members
        .iter()
        .zip(&scores)
        .filter(|(&i, _)| !is_labeled[i])
        .map(|(&i, &s)| (i, s))
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.into_iter().map(|(i, _)| i).collect()
}

//! Query strategies: each selects a batch of `b` unlabeled train indices.

mod badge;
mod dropquery;
mod probcover;
mod uncertainty;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use badge::{badge_gradient_embeddings, query_badge, GradientFactors};
pub use dropquery::{dropquery_inconsistency, query_dropquery};
pub use probcover::{
    delta_grid, estimate_probcover_delta, probcover_greedy, query_probcover, DeltaEstimate, DELTA_GRID_LEN,
    DELTA_GRID_MAX, DELTA_GRID_MIN,
};
pub use uncertainty::{entropy, margin, score_entropy, score_margin, select_highest, select_lowest};

use crate::error::{Error, Result};
use crate::ips::{self, PoolState, DEFAULT_TYPICLUST_KNN, DEFAULT_TYPICLUST_MAX_CLUSTERS};
use crate::probe::ProbeParams;
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryStrategy {
    Random,
    Margin,
    Entropy,
    #[serde(rename = "coreset")]
    CoreSet,
    #[serde(rename = "probcover")]
    ProbCover,
    #[serde(rename = "typiclust")]
    TypiClust,
    Badge,
    #[serde(rename = "dropquery")]
    DropQuery,
}

impl QueryStrategy {
    pub const ALL: [QueryStrategy; 8] = [
        QueryStrategy::Random,
        QueryStrategy::Margin,
        QueryStrategy::Entropy,
        QueryStrategy::CoreSet,
        QueryStrategy::ProbCover,
        QueryStrategy::TypiClust,
        QueryStrategy::Badge,
        QueryStrategy::DropQuery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QueryStrategy::Random => "random",
            QueryStrategy::Margin => "margin",
            QueryStrategy::Entropy => "entropy",
            QueryStrategy::CoreSet => "coreset",
            QueryStrategy::ProbCover => "probcover",
            QueryStrategy::TypiClust => "typiclust",
            QueryStrategy::Badge => "badge",
            QueryStrategy::DropQuery => "dropquery",
        }
    }
}

impl fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryStrategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

/// ProbCover ball radius: a fixed value or estimated from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaSetting {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Default for DeltaSetting {
    fn default() -> Self {
        DeltaSetting::Auto(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyParams {
    pub probcover_delta: DeltaSetting,
    pub probcover_purity_threshold: f64,
    /// Unit-normalize embeddings before ProbCover coverage and δ estimation.
    pub probcover_normalize: bool,
    pub dropquery_masks: usize,
    pub dropquery_rate: f64,
    pub typiclust_knn: usize,
    pub typiclust_max_clusters: usize,
}

impl Default for StrategyParams {
    fn default() -> Self {
        StrategyParams {
            probcover_delta: DeltaSetting::default(),
            probcover_purity_threshold: 0.95,
            probcover_normalize: true,
            dropquery_masks: 10,
            dropquery_rate: 0.5,
            typiclust_knn: DEFAULT_TYPICLUST_KNN,
            typiclust_max_clusters: DEFAULT_TYPICLUST_MAX_CLUSTERS,
        }
    }
}

impl StrategyParams {
    pub fn validate(&self) -> Result<()> {
        if let DeltaSetting::Fixed(d) = self.probcover_delta {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::Config(format!("probcover_delta must be positive, got {d}")));
            }
        }
        let t = self.probcover_purity_threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("probcover_purity_threshold {t} outside [0, 1]")));
        }
        let r = self.dropquery_rate;
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("dropquery_rate {r} outside (0, 1)")));
        }
        if self.typiclust_knn == 0 || self.typiclust_max_clusters == 0 {
            return Err(Error::Config("typiclust parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a strategy may look at when choosing a batch.
#[derive(Debug, Clone, Copy)]
pub struct QueryContext<'a> {
    /// Train embeddings.
    pub features: &'a EmbeddingMatrix,
    pub num_classes: usize,
    pub pool: &'a PoolState,
    /// Probe fitted on exactly the current labeled pool.
    pub probe: &'a ProbeParams,
    pub batch_size: usize,
    pub params: &'a StrategyParams,
    /// Pre-resolved ProbCover radius; overrides `params.probcover_delta`.
    pub probcover_delta: Option<f64>,
}

/// Runs `strategy` and checks that it returned exactly `b` distinct
/// unlabeled indices.
pub fn select_batch<R: Rng>(strategy: QueryStrategy, ctx: &QueryContext<'_>, rng: &mut R) -> Result<Vec<usize>> {
    let b = ctx.batch_size;
    if b > ctx.pool.unlabeled().len() {
        return Err(Error::Strategy {
            strategy: strategy.name().into(),
            message: format!("batch size {b} exceeds {} unlabeled points", ctx.pool.unlabeled().len()),
        });
    }
    if b == 0 {
        return Ok(Vec::new());
    }
    let batch = match strategy {
        QueryStrategy::Random => query_random(ctx, rng),
        QueryStrategy::Margin => uncertainty::query_margin(ctx)?,
        QueryStrategy::Entropy => uncertainty::query_entropy(ctx)?,
        QueryStrategy::CoreSet => query_coreset(ctx, rng)?,
        QueryStrategy::ProbCover => query_probcover(ctx, rng)?,
        QueryStrategy::TypiClust => query_typiclust(ctx, rng),
        QueryStrategy::Badge => query_badge(ctx, rng)?,
        QueryStrategy::DropQuery => query_dropquery(ctx, rng)?,
    };
    check_batch(strategy, ctx, &batch)?;
    Ok(batch)
}

fn check_batch(strategy: QueryStrategy, ctx: &QueryContext<'_>, batch: &[usize]) -> Result<()> {
    let fail = |message: String| Error::Strategy {
        strategy: strategy.name().into(),
        message,
    };
    if batch.len() != ctx.batch_size {
        return Err(fail(format!("returned {} indices, expected {}", batch.len(), ctx.batch_size)));
    }
    let mut seen = vec![false; ctx.pool.num_train()];
    for &i in batch {
        if i >= seen.len() || ctx.pool.is_labeled(i) {
            return Err(fail(format!("index {i} is not unlabeled")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(fail(format!("index {i} selected twice")));
        }
    }
    Ok(())
}

/// Uniform sample of `b` unlabeled indices without replacement.
pub fn query_random<R: Rng>(ctx: &QueryContext<'_>, rng: &mut R) -> Vec<usize> {
    let unlabeled = ctx.pool.unlabeled();
    rand::seq::index::sample(rng, unlabeled.len(), ctx.batch_size)
        .into_iter()
        .map(|k| unlabeled[k])
        .collect()
}

/// k-center greedy from the labeled pool over the unlabeled pool.
pub fn query_coreset<R: Rng>(ctx: &QueryContext<'_>, rng: &mut R) -> Result<Vec<usize>> {
    ips::kcenter_greedy(ctx.features, ctx.pool.unlabeled(), ctx.pool.labeled(), ctx.batch_size, rng)
}

pub fn query_typiclust<R: Rng>(ctx: &QueryContext<'_>, rng: &mut R) -> Vec<usize> {
    ips::typiclust_select(
        ctx.features,
        ctx.pool.labeled_mask(),
        ctx.batch_size,
        ctx.params.typiclust_knn,
        ctx.params.typiclust_max_clusters,
        rng,
    )
    .picks
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn ctx<'a>(
        features: &'a EmbeddingMatrix,
        num_classes: usize,
        pool: &'a PoolState,
        probe: &'a ProbeParams,
        batch_size: usize,
        params: &'a StrategyParams,
    ) -> QueryContext<'a> {
        QueryContext {
            features,
            num_classes,
            pool,
            probe,
            batch_size,
            params,
            probcover_delta: None,
        }
    }
}

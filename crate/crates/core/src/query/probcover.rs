//! ProbCover: greedy maximum coverage with δ-balls.
//!
//! Coverage is tracked as per-candidate counts of still-uncovered points in
//! its ball. Picking a point recomputes only the counts affected by the
//! points it newly covers, so no edge list is ever stored.

use std::borrow::Cow;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, sq_dist};
use crate::store::EmbeddingMatrix;

use super::{DeltaSetting, QueryContext};

pub const DELTA_GRID_MIN: f64 = 0.05;
pub const DELTA_GRID_MAX: f64 = 1.0;
pub const DELTA_GRID_LEN: usize = 30;

/// Log-spaced candidate radii, ascending.
pub fn delta_grid() -> Vec<f64> {
    let ratio = DELTA_GRID_MAX / DELTA_GRID_MIN;
    (0..DELTA_GRID_LEN)
        .map(|i| {
            if i == DELTA_GRID_LEN - 1 {
                DELTA_GRID_MAX
            } else {
                DELTA_GRID_MIN * ratio.powf(i as f64 / (DELTA_GRID_LEN - 1) as f64)
            }
        })
        .collect()
}

/// Greedy coverage over `candidates`. Points within δ of any labeled point
/// start covered. Once nothing uncovered remains reachable, the rest of the
/// batch is the lowest-index unpicked candidates.
pub fn probcover_greedy(
    features: &EmbeddingMatrix,
    labeled: &[usize],
    candidates: &[usize],
    delta: f64,
    b: usize,
) -> Result<Vec<usize>> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::Config(format!("ProbCover δ must be positive, got {delta}")));
    }
    let n = features.rows();
    let r2 = delta * delta;
    let within = |i: usize, j: usize| sq_dist(features.row(i), features.row(j)) <= r2;

    let mut covered: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|y| labeled.iter().any(|&l| within(l, y)))
        .collect();
    let mut counts: Vec<usize> = candidates
        .par_iter()
        .map(|&u| (0..n).filter(|&y| !covered[y] && within(u, y)).count())
        .collect();
    let mut picked = vec![false; candidates.len()];
    let mut picks = Vec::with_capacity(b);

    while picks.len() < b {
        let mut best: Option<usize> = None;
        for pos in 0..candidates.len() {
            if picked[pos] {
                continue;
            }
            best = match best {
                None => Some(pos),
                Some(q) => {
                    let better = counts[pos] > counts[q] || (counts[pos] == counts[q] && candidates[pos] < candidates[q]);
                    Some(if better { pos } else { q })
                }
            };
        }
        let Some(pos) = best else { break };
        picked[pos] = true;
        let p = candidates[pos];
        picks.push(p);
        if counts[pos] == 0 {
            continue;
        }
        let newly: Vec<usize> = (0..n).filter(|&y| !covered[y] && within(p, y)).collect();
        for &y in &newly {
            covered[y] = true;
        }
        counts
            .par_iter_mut()
            .zip(candidates.par_iter())
            .zip(picked.par_iter())
            .for_each(|((count, &u), &done)| {
                if !done && *count > 0 {
                    *count -= newly.iter().filter(|&&y| within(u, y)).count();
                }
            });
    }
    Ok(picks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaEstimate {
    pub delta: f64,
    pub purity: f64,
    /// False when no grid radius reached the purity threshold.
    pub satisfied: bool,
}

/// Largest grid radius whose ball purity under k-means pseudo-labels
/// (k = `num_classes`) reaches `purity_threshold`. A ball around x is pure
/// when every point within δ shares x's pseudo-label.
pub fn estimate_probcover_delta<R: Rng>(
    features: &EmbeddingMatrix,
    num_classes: usize,
    purity_threshold: f64,
    rng: &mut R,
) -> Result<DeltaEstimate> {
    if num_classes < 2 {
        return Err(Error::Config("δ estimation needs at least two classes".into()));
    }
    let n = features.rows();
    let all: Vec<usize> = (0..n).collect();
    let labels = kmeans(features, &all, num_classes, rng).assignments;

    // Squared distance from each point to its nearest differently-labeled one.
    let nearest_other: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|x| {
            (0..n)
                .filter(|&y| labels[y] != labels[x])
                .map(|y| sq_dist(features.row(x), features.row(y)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let purity = |delta: f64| {
        let r2 = delta * delta;
        nearest_other.iter().filter(|&&d| d > r2).count() as f64 / n.max(1) as f64
    };

    let grid = delta_grid();
    for &delta in grid.iter().rev() {
        let p = purity(delta);
        if p >= purity_threshold {
            return Ok(DeltaEstimate {
                delta,
                purity: p,
                satisfied: true,
            });
        }
    }
    let delta = grid[0];
    log::warn!("no ProbCover radius reaches purity {purity_threshold}; falling back to δ = {delta}");
    Ok(DeltaEstimate {
        delta,
        purity: purity(delta),
        satisfied: false,
    })
}

pub fn query_probcover<R: Rng>(ctx: &QueryContext<'_>, rng: &mut R) -> Result<Vec<usize>> {
    let features: Cow<'_, EmbeddingMatrix> = if ctx.params.probcover_normalize {
        Cow::Owned(ctx.features.unit_normalized())
    } else {
        Cow::Borrowed(ctx.features)
    };
    let delta = match (ctx.probcover_delta, ctx.params.probcover_delta) {
        (Some(d), _) => d,
        (None, DeltaSetting::Fixed(d)) => d,
        (None, DeltaSetting::Auto(_)) => {
            estimate_probcover_delta(&features, ctx.num_classes, ctx.params.probcover_purity_threshold, rng)?.delta
        }
    };
    probcover_greedy(&features, ctx.pool.labeled(), ctx.pool.unlabeled(), delta, ctx.batch_size)
}

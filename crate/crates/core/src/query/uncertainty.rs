use crate::error::Result;
use crate::probe::{predict_proba, FeatureView, Probabilities};

use super::QueryContext;

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Gap between the two largest probabilities.
pub fn margin(p: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    first - second
}

pub fn score_entropy(probs: &Probabilities) -> Vec<f64> {
    (0..probs.rows()).map(|i| entropy(probs.row(i))).collect()
}

pub fn score_margin(probs: &Probabilities) -> Vec<f64> {
    (0..probs.rows()).map(|i| margin(probs.row(i))).collect()
}

/// The `b` entries of `ids` with the largest scores; ties by lowest id.
pub fn select_highest(ids: &[usize], scores: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(ids[x].cmp(&ids[y])));
    order.into_iter().take(b).map(|k| ids[k]).collect()
}

/// The `b` entries of `ids` with the smallest scores; ties by lowest id.
pub fn select_lowest(ids: &[usize], scores: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&x, &y| scores[x].total_cmp(&scores[y]).then(ids[x].cmp(&ids[y])));
    order.into_iter().take(b).map(|k| ids[k]).collect()
}

fn unlabeled_probs(ctx: &QueryContext<'_>) -> Result<Probabilities> {
    predict_proba(ctx.probe, FeatureView::subset(ctx.features, ctx.pool.unlabeled()))
}

pub(super) fn query_entropy(ctx: &QueryContext<'_>) -> Result<Vec<usize>> {
    let scores = score_entropy(&unlabeled_probs(ctx)?);
    Ok(select_highest(ctx.pool.unlabeled(), &scores, ctx.batch_size))
}

pub(super) fn query_margin(ctx: &QueryContext<'_>) -> Result<Vec<usize>> {
    let scores = score_margin(&unlabeled_probs(ctx)?);
    Ok(select_lowest(ctx.pool.unlabeled(), &scores, ctx.batch_size))
}

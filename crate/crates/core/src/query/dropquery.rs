//! DropQuery: prediction inconsistency under random feature dropout.
//!
//! Each unlabeled point gets `M` dropout masks (each feature zeroed with
//! probability `rate`, survivors rescaled by `1 / (1 − rate)`). Its
//! inconsistency is how many masked predictions disagree with the unmasked
//! one. Points with any disagreement are candidates; candidates are clustered
//! into `b` groups and the most inconsistent member of each is queried.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::kmeans::kmeans;
use crate::probe::{argmax, ProbeParams};
use crate::store::EmbeddingMatrix;

use super::QueryContext;

/// Per-row inconsistency counts. Row `k` draws its masks from its own stream
/// derived from `(base_seed, rows[k])`, so the result does not depend on
/// thread scheduling.
pub fn dropquery_inconsistency(
    probe: &ProbeParams,
    features: &EmbeddingMatrix,
    rows: &[usize],
    masks: usize,
    rate: f64,
    base_seed: u64,
) -> Vec<u32> {
    let c = probe.classes();
    let keep_scale = 1.0 / (1.0 - rate);
    rows.par_iter()
        .map_init(
            || (vec![0.0f64; c], Vec::<f32>::new()),
            |(logits, masked), &i| {
                let x = features.row(i);
                probe.logits_into(x, logits);
                let base = argmax(logits);
                let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
                rng.set_stream(i as u64);
                let mut flips = 0;
                for _ in 0..masks {
                    masked.clear();
                    masked.extend(x.iter().map(|&v| {
                        if rng.random::<f64>() < rate {
                            0.0
                        } else {
                            (v as f64 * keep_scale) as f32
                        }
                    }));
                    probe.logits_into(masked, logits);
                    if argmax(logits) != base {
                        flips += 1;
                    }
                }
                flips
            },
        )
        .collect()
}

pub fn query_dropquery<R: Rng>(ctx: &QueryContext<'_>, rng: &mut R) -> Result<Vec<usize>> {
    let unlabeled = ctx.pool.unlabeled();
    let b = ctx.batch_size;
    let base_seed: u64 = rng.random();
    let scores = dropquery_inconsistency(
        ctx.probe,
        ctx.features,
        unlabeled,
        ctx.params.dropquery_masks,
        ctx.params.dropquery_rate,
        base_seed,
    );
    let candidates: Vec<usize> = (0..unlabeled.len()).filter(|&k| scores[k] > 0).collect();

    if candidates.len() < b {
        let mut batch: Vec<usize> = candidates.iter().map(|&k| unlabeled[k]).collect();
        let rest: Vec<usize> = (0..unlabeled.len()).filter(|&k| scores[k] == 0).map(|k| unlabeled[k]).collect();
        let fill = rand::seq::index::sample(rng, rest.len(), b - batch.len());
        batch.extend(fill.into_iter().map(|k| rest[k]));
        return Ok(batch);
    }

    let cand_rows: Vec<usize> = candidates.iter().map(|&k| unlabeled[k]).collect();
    let clustering = kmeans(ctx.features, &cand_rows, b, rng);
    let mut taken = vec![false; candidates.len()];
    let mut batch = Vec::with_capacity(b);
    // Most inconsistent first, ties by lowest index.
    let better = |a: usize, b: usize| scores[candidates[a]] > scores[candidates[b]] || (scores[candidates[a]] == scores[candidates[b]] && cand_rows[a] < cand_rows[b]);
    for members in clustering.members() {
        if let Some(best) = members.iter().copied().reduce(|a, c| if better(c, a) { c } else { a }) {
            taken[best] = true;
            batch.push(cand_rows[best]);
        }
    }
    if batch.len() < b {
        let mut rest: Vec<usize> = (0..candidates.len()).filter(|&p| !taken[p]).collect();
        rest.sort_by(|&x, &y| if better(x, y) { std::cmp::Ordering::Less } else if better(y, x) { std::cmp::Ordering::Greater } else { std::cmp::Ordering::Equal });
        batch.extend(rest.into_iter().take(b - batch.len()).map(|p| cand_rows[p]));
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ips::PoolState;
    use crate::query::{test_support, StrategyParams};
    use crate::seeding::stream;

    #[test]
    fn zero_probe_is_never_inconsistent() {
        let m = EmbeddingMatrix::new(5, 3, (0..15).map(|v| v as f32 - 7.0).collect()).unwrap();
        let probe = ProbeParams::zeros(3, 3);
        let s = dropquery_inconsistency(&probe, &m, &[0, 1, 2, 3, 4], 10, 0.5, 42);
        assert!(s.iter().all(|&v| v == 0));

        let pool = PoolState::new(5, &[0]).unwrap();
        let params = StrategyParams::default();
        let ctx = test_support::ctx(&m, 3, &pool, &probe, 2, &params);
        let a = query_dropquery(&ctx, &mut stream(4, "dropquery", "query")).unwrap();
        let mut b = crate::query::query_random(&ctx, &mut {
            let mut r = stream(4, "dropquery", "query");
            let _: u64 = r.random();
            r
        });
        let mut a_sorted = a.clone();
        a_sorted.sort();
        b.sort();
        assert_eq!(a_sorted, b);
    }

    #[test]
    fn no_masks_means_random_fill() {
        let m = EmbeddingMatrix::new(4, 1, vec![-1.0, 0.1, 2.0, -3.0]).unwrap();
        let probe = ProbeParams::new(2, 1, vec![1.0, -1.0], vec![0.0, 0.0]).unwrap();
        assert!(dropquery_inconsistency(&probe, &m, &[0, 1, 2, 3], 0, 0.5, 1).iter().all(|&v| v == 0));
    }

    #[test]
    fn boundary_points_flip_more() {
        // Decision function is the feature sum.
        let m = EmbeddingMatrix::from_rows(&[[3.0f32, 3.0, 3.0, 3.0], [1.0, 1.0, 1.0, -2.9]]).unwrap();
        let probe = ProbeParams::new(2, 4, vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0], vec![0.0, 0.0]).unwrap();
        let s = dropquery_inconsistency(&probe, &m, &[0, 1], 1000, 0.5, 9);
        assert!(s[1] > s[0], "{s:?}");
    }

    #[test]
    fn rows_are_schedule_independent() {
        let m = EmbeddingMatrix::new(6, 2, vec![0.1, -0.1, 1.0, -1.2, 0.3, 0.2, -0.5, 0.4, 2.0, 2.1, -0.05, 0.0]).unwrap();
        let probe = ProbeParams::new(2, 2, vec![1.0, 1.0, -1.0, -1.0], vec![0.0, 0.0]).unwrap();
        let all = dropquery_inconsistency(&probe, &m, &[0, 1, 2, 3, 4, 5], 50, 0.5, 3);
        let some = dropquery_inconsistency(&probe, &m, &[4, 1], 50, 0.5, 3);
        assert_eq!(some, vec![all[4], all[1]]);
    }
}

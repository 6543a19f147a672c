mod common;

use alforge::ips::{self, IpsConfig, IpsStrategy, PoolState};
use alforge::kmeans::{kmeanspp_select, DenseVectors, FirstPick, PointSet};
use alforge::probe::{FeatureView, Probabilities, ProbeParams};
use alforge::query::{self, QueryContext, QueryStrategy, StrategyParams};
use alforge::seeding::stream;
use alforge::store::EmbeddingMatrix;
use alforge::synth::{gaussian_blobs, BlobSpec};
use common::oracles;
use common::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Random points, sometimes with exact duplicates to exercise tie-breaking.
fn points(r: &mut impl Rng, n: usize, d: usize) -> EmbeddingMatrix {
    let mut m = matrix(r, n, d, 1.0).as_slice().to_vec();
    if r.random_bool(0.3) {
        for _ in 0..n / 4 {
            let (a, b) = (r.random_range(0..n), r.random_range(0..n));
            let src: Vec<f32> = m[a * d..(a + 1) * d].to_vec();
            m[b * d..(b + 1) * d].copy_from_slice(&src);
        }
    }
    EmbeddingMatrix::new(n, d, m).unwrap()
}

fn split(r: &mut impl Rng, n: usize, labeled: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(r);
    let mut l = ids[..labeled].to_vec();
    let mut u = ids[labeled..].to_vec();
    l.sort();
    u.sort();
    (l, u)
}

#[test]
fn kcenter_matches_oracle() {
    let mut r = rng(1);
    for case in 0..200 {
        let n = r.random_range(2..=50);
        let d = r.random_range(1..=4);
        let x = points(&mut r, n, d);
        let m = r.random_range(0..n);
        let (l, u) = split(&mut r, n, m);
        let k = r.random_range(1..=u.len());
        let mut lib_rng = stream(case, "coreset", "query");
        let first = if l.is_empty() {
            Some(u[stream(case, "coreset", "query").random_range(0..u.len())])
        } else {
            None
        };
        let got = ips::kcenter_greedy(&x, &u, &l, k, &mut lib_rng).unwrap();
        assert_eq!(got, oracles::kcenter(&x, &u, &l, k, first), "case {case}");
    }
}

#[test]
fn probcover_matches_oracle() {
    let mut r = rng(2);
    for case in 0..200 {
        let n = r.random_range(2..=50);
        let d = r.random_range(1..=3);
        let x = points(&mut r, n, d);
        let m = r.random_range(0..n);
        let (l, u) = split(&mut r, n, m);
        let b = r.random_range(1..=u.len());
        let delta = r.random_range(0.05..1.5);
        let got = query::probcover_greedy(&x, &l, &u, delta, b).unwrap();
        assert_eq!(got, oracles::probcover(&x, &l, &u, delta, b), "case {case}");
    }
}

fn random_probabilities(r: &mut impl Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| r.random_range(0.0..1.0f64).powi(3)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    for _ in 0..n / 5 {
        let (a, b) = (r.random_range(0..n), r.random_range(0..n));
        rows[b] = rows[a].clone();
    }
    rows
}

#[test]
fn uncertainty_scores_match_oracle() {
    let mut r = rng(3);
    for case in 0..200 {
        let n = r.random_range(1..=50);
        let c = r.random_range(2..=6);
        let rows = random_probabilities(&mut r, n, c);
        let mut ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        ids.shuffle(&mut r);
        let b = r.random_range(1..=n);
        let probs = Probabilities::from_rows(rows.clone());
        let ent: Vec<f64> = rows.iter().map(|p| oracles::entropy(p)).collect();
        let mar: Vec<f64> = rows.iter().map(|p| oracles::margin(p)).collect();
        assert_eq!(
            query::select_highest(&ids, &query::score_entropy(&probs), b),
            oracles::top_b(&ids, &ent, b, true),
            "entropy case {case}"
        );
        assert_eq!(
            query::select_lowest(&ids, &query::score_margin(&probs), b),
            oracles::top_b(&ids, &mar, b, false),
            "margin case {case}"
        );
    }
}

fn ctx<'a>(x: &'a EmbeddingMatrix, c: usize, pool: &'a PoolState, probe: &'a ProbeParams, b: usize, params: &'a StrategyParams) -> QueryContext<'a> {
    QueryContext {
        features: x,
        num_classes: c,
        pool,
        probe,
        batch_size: b,
        params,
        probcover_delta: None,
    }
}

#[test]
fn uncertainty_batches_follow_the_probe() {
    let mut r = rng(4);
    let params = StrategyParams::default();
    for case in 0..100 {
        let n = r.random_range(2..=50);
        let (d, c) = (r.random_range(1..=5), r.random_range(2..=5));
        let x = matrix(&mut r, n, d, 2.0);
        let p = probe(&mut r, c, d, 2.0);
        let m = r.random_range(1..n);
        let (l, u) = split(&mut r, n, m);
        let pool = PoolState::new(n, &l).unwrap();
        let b = r.random_range(1..=u.len());
        let probs: Vec<Vec<f64>> = u.iter().map(|&i| softmax(&logits(&p, x.row(i)))).collect();
        let ent: Vec<f64> = probs.iter().map(|q| oracles::entropy(q)).collect();
        let mar: Vec<f64> = probs.iter().map(|q| oracles::margin(q)).collect();
        let q = ctx(&x, c, &pool, &p, b, &params);
        let mut s = rng(0);
        let mut got = query::select_batch(QueryStrategy::Entropy, &q, &mut s).unwrap();
        let mut want = oracles::top_b(&u, &ent, b, true);
        got.sort();
        want.sort();
        assert_eq!(got, want, "entropy case {case}");
        let mut got = query::select_batch(QueryStrategy::Margin, &q, &mut s).unwrap();
        let mut want = oracles::top_b(&u, &mar, b, false);
        got.sort();
        want.sort();
        assert_eq!(got, want, "margin case {case}");
    }
}

/// Single-row cross-entropy at label `y` as a function of the weights.
fn row_loss(p: &ProbeParams, x: &[f32], y: usize) -> f64 {
    -softmax(&logits(p, x))[y].ln()
}

#[test]
fn badge_embeddings_are_loss_gradients() {
    let mut r = rng(6);
    for case in 0..100 {
        let (d, c) = (r.random_range(1..=6), r.random_range(2..=5));
        let x = matrix(&mut r, 3, d, 2.0);
        let p = probe(&mut r, c, d, 1.5);
        let emb = query::badge_gradient_embeddings(&p, FeatureView::all(&x)).unwrap();
        for i in 0..x.rows() {
            let pr = softmax(&logits(&p, x.row(i)));
            let yhat = (0..c).fold(0, |best, k| if pr[k] > pr[best] { k } else { best });
            let g = emb.row(i);
            let h = 1e-6;
            let mut err: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for k in 0..c * d {
                let shifted = |delta: f64| {
                    let mut w = p.weights().to_vec();
                    w[k] += delta;
                    ProbeParams::new(c, d, w, p.bias().to_vec()).unwrap()
                };
                let fd = (row_loss(&shifted(h), x.row(i), yhat) - row_loss(&shifted(-h), x.row(i), yhat)) / (2.0 * h);
                let exact = (pr[k / d] - if k / d == yhat { 1.0 } else { 0.0 }) * x.row(i)[k % d] as f64;
                assert!((g[k] - exact).abs() <= 1e-12 * exact.abs().max(1.0), "case {case}");
                err = err.max((g[k] - fd).abs());
                scale = scale.max(fd.abs());
            }
            // Central differences carry ~1e-10 of rounding noise at this step.
            assert!(err <= 1e-6 * scale + 1e-9, "case {case}: {err} vs {scale}");
        }
    }
}

#[test]
fn kcenter_is_a_two_approximation() {
    fn radius(x: &EmbeddingMatrix, centers: &[usize]) -> f64 {
        (0..x.rows())
            .map(|i| centers.iter().map(|&c| oracles::d2(x, i, c).sqrt()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    }
    fn best(x: &EmbeddingMatrix, k: usize, start: usize, chosen: &mut Vec<usize>) -> f64 {
        if chosen.len() == k {
            return radius(x, chosen);
        }
        let mut opt = f64::INFINITY;
        for i in start..x.rows() {
            chosen.push(i);
            opt = opt.min(best(x, k, i + 1, chosen));
            chosen.pop();
        }
        opt
    }
    let mut r = rng(7);
    for case in 0..60 {
        let n = r.random_range(2..=12);
        let x = matrix(&mut r, n, 2, 1.0);
        let all: Vec<usize> = (0..n).collect();
        let k = r.random_range(1..=n.min(4));
        let greedy = ips::kcenter_greedy(&x, &all, &[], k, &mut stream(case, "coreset", "ips")).unwrap();
        let opt = best(&x, k, 0, &mut Vec::new());
        assert!(radius(&x, &greedy) <= 2.0 * opt + 1e-9, "case {case}");
    }
}

#[test]
fn kmeanspp_second_pick_follows_squared_distance() {
    let pts = DenseVectors::new(2, vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, -1.0, -1.0]);
    // First pick is the max-norm point 0; D² of the others to it.
    let d2: Vec<f64> = (0..5).map(|i| pts.sq_dist(0, i)).collect();
    let total: f64 = d2.iter().sum();
    let trials = 10_000;
    let mut counts = [0usize; 5];
    let mut s = rng(8);
    for _ in 0..trials {
        let picks = kmeanspp_select(&pts, 2, &mut s, FirstPick::MaxNorm);
        assert_eq!(picks[0], 0);
        counts[picks[1]] += 1;
    }
    for i in 0..5 {
        let freq = counts[i] as f64 / trials as f64;
        assert!((freq - d2[i] / total).abs() <= 0.02, "point {i}: {freq} vs {}", d2[i] / total);
    }
}

#[test]
fn random_query_includes_each_point_uniformly() {
    let n = 50;
    let x = matrix(&mut rng(0), n, 2, 1.0);
    let labeled: Vec<usize> = (0..10).collect();
    let pool = PoolState::new(n, &labeled).unwrap();
    let p = ProbeParams::zeros(2, 2);
    let params = StrategyParams::default();
    let b = 8;
    let q = ctx(&x, 2, &pool, &p, b, &params);
    let trials = 4000;
    let mut counts = vec![0usize; n];
    let mut s = stream(0, "random", "query");
    for _ in 0..trials {
        for i in query::select_batch(QueryStrategy::Random, &q, &mut s).unwrap() {
            counts[i] += 1;
        }
    }
    let pi = b as f64 / 40.0;
    let mean = trials as f64 * pi;
    let sigma = (trials as f64 * pi * (1.0 - pi)).sqrt();
    for (i, &cnt) in counts.iter().enumerate() {
        if i < 10 {
            assert_eq!(cnt, 0);
        } else {
            assert!((cnt as f64 - mean).abs() <= 3.0 * sigma, "index {i}: {cnt} vs {mean} ± {sigma}");
        }
    }
}

#[test]
fn typiclust_takes_the_most_typical_point_of_each_blob() {
    let ds = gaussian_blobs(&BlobSpec {
        num_classes: 3,
        dim: 2,
        num_train: 90,
        num_test: 9,
        center_scale: 20.0,
        noise_std: 0.5,
        budget: 3,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let picks = ips::select_initial(&ds, &IpsConfig::new(IpsStrategy::TypiClust, 3, 0)).unwrap();
    let mut classes: Vec<usize> = picks.iter().map(|&i| ds.train_labels.get(i)).collect();
    classes.sort();
    assert_eq!(classes, vec![0, 1, 2]);
    for &p in &picks {
        let y = ds.train_labels.get(p);
        let blob: Vec<usize> = (0..90).filter(|&i| ds.train_labels.get(i) == y).collect();
        // Typicality: inverse mean distance to the 20 nearest blob members.
        let typ = |i: usize| {
            let mut d: Vec<f64> = blob.iter().filter(|&&j| j != i).map(|&j| oracles::d2(&ds.train, i, j).sqrt()).collect();
            d.sort_by(|a, b| a.total_cmp(b));
            1.0 / (d[..20].iter().sum::<f64>() / 20.0)
        };
        let best = blob.iter().copied().fold(blob[0], |b, i| if typ(i) > typ(b) { i } else { b });
        assert!((typ(p) - typ(best)).abs() <= 1e-9 * typ(best), "pick {p} vs {best}");
    }
}

#[test]
fn empty_pool_query_equals_initial_selection() {
    let ds = gaussian_blobs(&BlobSpec {
        num_train: 120,
        num_test: 10,
        dim: 4,
        budget: 10,
        ..Default::default()
    })
    .unwrap();
    let pool = PoolState::new(120, &[]).unwrap();
    let p = ProbeParams::zeros(4, 4);
    let params = StrategyParams::default();
    for seed in 0..3 {
        for (ips_strategy, strategy) in [(IpsStrategy::TypiClust, QueryStrategy::TypiClust), (IpsStrategy::CoreSet, QueryStrategy::CoreSet)] {
            let initial = ips::select_initial(&ds, &IpsConfig::new(ips_strategy, 10, seed)).unwrap();
            let q = ctx(&ds.train, 4, &pool, &p, 10, &params);
            let mut s = stream(seed, ips_strategy.name(), "ips");
            assert_eq!(query::select_batch(strategy, &q, &mut s).unwrap(), initial);
        }
    }
}

#[test]
fn uncertainty_is_invariant_under_class_permutation() {
    let mut r = rng(12);
    let params = StrategyParams::default();
    for _ in 0..50 {
        let n = r.random_range(3..=40);
        let (d, c) = (r.random_range(1..=4), r.random_range(2..=5));
        let x = matrix(&mut r, n, d, 2.0);
        let p = probe(&mut r, c, d, 2.0);
        let rot = r.random_range(1..c + 1) % c;
        let perm: Vec<usize> = (0..c).map(|k| (k + rot) % c).collect();
        let mut w = vec![0.0; c * d];
        let mut bias = vec![0.0; c];
        for k in 0..c {
            w[perm[k] * d..(perm[k] + 1) * d].copy_from_slice(p.weight_row(k));
            bias[perm[k]] = p.bias()[k];
        }
        let q2 = ProbeParams::new(c, d, w, bias).unwrap();
        let pool = PoolState::new(n, &[0]).unwrap();
        let b = r.random_range(1..n);
        for s in [QueryStrategy::Entropy, QueryStrategy::Margin] {
            let a = query::select_batch(s, &ctx(&x, c, &pool, &p, b, &params), &mut rng(0)).unwrap();
            let bb = query::select_batch(s, &ctx(&x, c, &pool, &q2, b, &params), &mut rng(0)).unwrap();
            assert_eq!(a, bb);
        }
    }
}

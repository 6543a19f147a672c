//! Brute-force reference implementations of the selection rules.

use alforge::store::EmbeddingMatrix;

pub fn d2(x: &EmbeddingMatrix, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..x.dim() {
        let d = x.row(i)[k] as f64 - x.row(j)[k] as f64;
        s += d * d;
    }
    s
}

/// Greedy k-center: every step rescans all centers. `first` is the pick the
/// caller's rng would make when `initial` is empty.
pub fn kcenter(x: &EmbeddingMatrix, candidates: &[usize], initial: &[usize], k: usize, first: Option<usize>) -> Vec<usize> {
    let mut centers = initial.to_vec();
    let mut picks = Vec::new();
    if initial.is_empty() {
        if let Some(f) = first {
            picks.push(f);
            centers.push(f);
        }
    }
    while picks.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for &u in candidates {
            if picks.contains(&u) {
                continue;
            }
            let dist = centers.iter().map(|&c| d2(x, u, c)).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bu, bd)| dist > bd || (dist == bd && u < bu)) {
                best = Some((u, dist));
            }
        }
        let (u, _) = best.unwrap();
        picks.push(u);
        centers.push(u);
    }
    picks
}

/// Greedy max coverage with balls of radius `delta`, recounting everything
/// each step. Once nothing new can be covered the lowest remaining
/// candidates are taken.
pub fn probcover(x: &EmbeddingMatrix, labeled: &[usize], candidates: &[usize], delta: f64, b: usize) -> Vec<usize> {
    let n = x.rows();
    let r2 = delta * delta;
    let mut covered: Vec<bool> = (0..n).map(|y| labeled.iter().any(|&l| d2(x, l, y) <= r2)).collect();
    let mut picks: Vec<usize> = Vec::new();
    while picks.len() < b {
        let mut best: Option<(usize, usize)> = None;
        for &u in candidates {
            if picks.contains(&u) {
                continue;
            }
            let gain = (0..n).filter(|&y| !covered[y] && d2(x, u, y) <= r2).count();
            if best.is_none_or(|(bu, bg)| gain > bg || (gain == bg && u < bu)) {
                best = Some((u, gain));
            }
        }
        let (u, _) = best.unwrap();
        picks.push(u);
        for y in 0..n {
            if d2(x, u, y) <= r2 {
                covered[y] = true;
            }
        }
    }
    picks
}

pub fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

pub fn margin(p: &[f64]) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s[0] - s[1]
}

/// Full sort by score (descending when `highest`), ties by id.
pub fn top_b(ids: &[usize], scores: &[f64], b: usize, highest: bool) -> Vec<usize> {
    let mut pairs: Vec<(usize, f64)> = ids.iter().copied().zip(scores.iter().copied()).collect();
    pairs.sort_by(|a, c| {
        let by_score = if highest { c.1.partial_cmp(&a.1) } else { a.1.partial_cmp(&c.1) };
        by_score.unwrap().then(a.0.cmp(&c.0))
    });
    pairs.into_iter().take(b).map(|(i, _)| i).collect()
}

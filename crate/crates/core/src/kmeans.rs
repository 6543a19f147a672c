//! k-means++ seeding and Lloyd's k-means.
//!
//! Both run sequentially where order matters (sampling, centroid sums) and in
//! parallel only for per-point work whose result does not depend on the
//! schedule.

use rand::Rng;
use rayon::prelude::*;

use crate::store::EmbeddingMatrix;

pub const MAX_LLOYD_ITERATIONS: usize = 100;

/// Squared Euclidean distance, accumulated in f64.
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn sq_dist_to_centroid(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// A finite set of points with Euclidean geometry.
pub trait PointSet: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn sq_norm(&self, i: usize) -> f64;
    fn sq_dist(&self, i: usize, j: usize) -> f64;
}

/// Dense f64 vectors, row-major.
pub struct DenseVectors {
    dim: usize,
    data: Vec<f64>,
}

impl DenseVectors {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim));
        DenseVectors { dim, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

impl PointSet for DenseVectors {
    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn sq_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|v| v * v).sum()
    }

    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// A subset of embedding rows, addressed by position in `rows`.
pub struct EmbeddingRows<'a> {
    pub matrix: &'a EmbeddingMatrix,
    pub rows: &'a [usize],
}

impl PointSet for EmbeddingRows<'_> {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn sq_norm(&self, i: usize) -> f64 {
        self.matrix.row(self.rows[i]).iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        sq_dist(self.matrix.row(self.rows[i]), self.matrix.row(self.rows[j]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstPick {
    /// Largest Euclidean norm, ties to the lowest index.
    MaxNorm,
    /// Uniform over all points.
    Random,
}

/// k-means++ (D²) sampling of `k` distinct positions of `points`.
///
/// Once every remaining point coincides with a chosen one, the remaining
/// picks are the lowest unchosen positions.
pub fn kmeanspp_select<P: PointSet, R: Rng>(points: &P, k: usize, rng: &mut R, first: FirstPick) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let first_idx = match first {
        FirstPick::MaxNorm => {
            let mut best = 0;
            let mut best_norm = points.sq_norm(0);
            for i in 1..n {
                let v = points.sq_norm(i);
                if v > best_norm {
                    best = i;
                    best_norm = v;
                }
            }
            best
        }
        FirstPick::Random => rng.random_range(0..n),
    };
    let mut chosen = vec![false; n];
    let mut picks = Vec::with_capacity(k);
    chosen[first_idx] = true;
    picks.push(first_idx);
    let mut nearest: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| points.sq_dist(i, first_idx))
        .collect();
    nearest[first_idx] = 0.0;

    while picks.len() < k {
        let total: f64 = (0..n).filter(|&i| !chosen[i]).map(|i| nearest[i]).sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = None;
            for i in 0..n {
                if chosen[i] || nearest[i] <= 0.0 {
                    continue;
                }
                acc += nearest[i];
                last_positive = Some(i);
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.or(last_positive).expect("positive mass implies a candidate")
        } else {
            (0..n).find(|&i| !chosen[i]).expect("k ≤ n")
        };
        chosen[next] = true;
        picks.push(next);
        nearest.par_iter_mut().enumerate().for_each(|(i, d)| {
            let nd = points.sq_dist(i, next);
            if nd < *d {
                *d = nd;
            }
        });
    }
    picks
}

#[derive(Debug, Clone)]
pub struct Clustering {
    pub k: usize,
    pub dim: usize,
    /// k×D row-major.
    pub centroids: Vec<f64>,
    /// Cluster id per input position.
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

impl Clustering {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Member positions per cluster, each in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn nearest_centroid(x: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.chunks(dim).enumerate() {
        let d = sq_dist_to_centroid(x, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Seeded k-means over `rows` of `matrix`: k-means++ seeding, then Lloyd
/// iterations until the assignment is a fixpoint or the iteration cap is hit.
/// An empty cluster is re-seeded with the point farthest from its centroid.
/// `k` is capped at the number of rows.
pub fn kmeans<R: Rng>(matrix: &EmbeddingMatrix, rows: &[usize], k: usize, rng: &mut R) -> Clustering {
    let n = rows.len();
    let dim = matrix.dim();
    let k = k.min(n).max(1);
    if n == 0 {
        return Clustering {
            k: 0,
            dim,
            centroids: Vec::new(),
            assignments: Vec::new(),
            iterations: 0,
        };
    }
    let points = EmbeddingRows { matrix, rows };
    let seeds = kmeanspp_select(&points, k, rng, FirstPick::Random);
    let mut centroids: Vec<f64> = seeds
        .iter()
        .flat_map(|&s| matrix.row(rows[s]).iter().map(|&v| v as f64))
        .collect();

    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let next: Vec<(usize, f64)> = rows
            .par_iter()
            .map(|&r| nearest_centroid(matrix.row(r), &centroids, dim))
            .collect();
        let changed = next.iter().zip(&assignments).any(|(a, &b)| a.0 != b);
        for (slot, &(c, _)) in assignments.iter_mut().zip(&next) {
            *slot = c;
        }
        if !changed {
            break;
        }

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(matrix.row(rows[i])) {
                *s += v as f64;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                    *dst = s * inv;
                }
            } else {
                // Farthest point from its own centroid, ties to lowest index.
                let mut far = None;
                let mut far_d = -1.0;
                for (i, &(_, d)) in next.iter().enumerate() {
                    if !taken[i] && d > far_d {
                        far = Some(i);
                        far_d = d;
                    }
                }
                if let Some(i) = far {
                    taken[i] = true;
                    for (dst, &v) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(matrix.row(rows[i])) {
                        *dst = v as f64;
                    }
                }
            }
        }
    }
    Clustering {
        k,
        dim,
        centroids,
        assignments,
        iterations,
    }
}

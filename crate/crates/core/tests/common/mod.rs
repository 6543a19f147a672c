//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use alforge::probe::ProbeParams;
use alforge::store::{EmbeddingMatrix, LabelVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rng: &mut impl Rng, rows: usize, dim: usize, scale: f32) -> EmbeddingMatrix {
    let data = (0..rows * dim).map(|_| rng.random_range(-scale..scale)).collect();
    EmbeddingMatrix::new(rows, dim, data).unwrap()
}

pub fn labels(rng: &mut impl Rng, n: usize, classes: usize) -> LabelVector {
    LabelVector::new((0..n).map(|_| rng.random_range(0..classes as u32)).collect())
}

pub fn probe(rng: &mut impl Rng, classes: usize, dim: usize, scale: f64) -> ProbeParams {
    let w = (0..classes * dim).map(|_| rng.random_range(-scale..scale)).collect();
    let b = (0..classes).map(|_| rng.random_range(-scale..scale)).collect();
    ProbeParams::new(classes, dim, w, b).unwrap()
}

/// Reference softmax in plain arithmetic.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn logits(p: &ProbeParams, x: &[f32]) -> Vec<f64> {
    (0..p.classes())
        .map(|c| p.bias()[c] + p.weight_row(c).iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>())
        .collect()
}

/// Regularized objective computed directly from its definition.
pub fn reference_loss(p: &ProbeParams, x: &EmbeddingMatrix, y: &[u32], inv_strength: f64) -> f64 {
    let n = x.rows() as f64;
    let ce: f64 = (0..x.rows())
        .map(|i| -softmax(&logits(p, x.row(i)))[y[i] as usize].ln())
        .sum::<f64>()
        / n;
    ce + p.weights().iter().map(|w| w * w).sum::<f64>() / (2.0 * inv_strength * n)
}

pub mod oracles;

//! BADGE: k-means++ seeding over last-layer gradient embeddings.
//!
//! For an input x with predicted probabilities p and hypothetical label
//! ŷ = argmax p, the gradient embedding is (p − e_ŷ) ⊗ x. Selection never
//! materializes these C·D-wide vectors; distances use the Kronecker identity
//! ⟨a⊗x, b⊗y⟩ = ⟨a, b⟩⟨x, y⟩.

use rand::Rng;

use crate::error::Result;
use crate::kmeans::{kmeanspp_select, DenseVectors, FirstPick, PointSet};
use crate::probe::{predict_proba, FeatureView, ProbeParams};
use crate::store::EmbeddingMatrix;

use super::QueryContext;

fn residuals(probe: &ProbeParams, features: FeatureView<'_>) -> Result<Vec<f64>> {
    let probs = predict_proba(probe, features)?;
    let c = probe.classes();
    let mut out = Vec::with_capacity(features.len() * c);
    for i in 0..features.len() {
        let yhat = probs.argmax(i);
        out.extend(probs.row(i).iter().enumerate().map(|(k, &p)| if k == yhat { p - 1.0 } else { p }));
    }
    Ok(out)
}

/// Dense gradient embeddings, one row of width C·D per input (class-major).
pub fn badge_gradient_embeddings(probe: &ProbeParams, features: FeatureView<'_>) -> Result<DenseVectors> {
    let (c, d) = (probe.classes(), probe.dim());
    let res = residuals(probe, features)?;
    let mut data = Vec::with_capacity(features.len() * c * d);
    for i in 0..features.len() {
        let x = features.row(i);
        for r in &res[i * c..(i + 1) * c] {
            data.extend(x.iter().map(|&v| r * v as f64));
        }
    }
    Ok(DenseVectors::new(c * d, data))
}

/// Gradient embeddings kept as (residual, embedding) factor pairs.
pub struct GradientFactors<'a> {
    classes: usize,
    residuals: Vec<f64>,
    residual_sq: Vec<f64>,
    matrix: &'a EmbeddingMatrix,
    rows: &'a [usize],
    feature_sq: Vec<f64>,
}

impl<'a> GradientFactors<'a> {
    pub fn new(probe: &ProbeParams, matrix: &'a EmbeddingMatrix, rows: &'a [usize]) -> Result<Self> {
        let c = probe.classes();
        let residuals = residuals(probe, FeatureView::subset(matrix, rows))?;
        let residual_sq = residuals.chunks(c).map(|r| r.iter().map(|v| v * v).sum()).collect();
        let feature_sq = rows
            .iter()
            .map(|&i| matrix.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum())
            .collect();
        Ok(GradientFactors {
            classes: c,
            residuals,
            residual_sq,
            matrix,
            rows,
            feature_sq,
        })
    }

    fn residual(&self, i: usize) -> &[f64] {
        &self.residuals[i * self.classes..(i + 1) * self.classes]
    }
}

impl PointSet for GradientFactors<'_> {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn sq_norm(&self, i: usize) -> f64 {
        self.residual_sq[i] * self.feature_sq[i]
    }

    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        let (ni, nj) = (self.sq_norm(i), self.sq_norm(j));
        let rr: f64 = self.residual(i).iter().zip(self.residual(j)).map(|(a, b)| a * b).sum();
        let xx: f64 = self
            .matrix
            .row(self.rows[i])
            .iter()
            .zip(self.matrix.row(self.rows[j]))
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let d = ni + nj - 2.0 * rr * xx;
        // Cancellation noise around coincident vectors.
        if d <= 1e-12 * (ni + nj) {
            0.0
        } else {
            d
        }
    }
}

pub fn query_badge<R: Rng>(ctx: &QueryContext<'_>, rng: &mut R) -> Result<Vec<usize>> {
    let unlabeled = ctx.pool.unlabeled();
    let factors = GradientFactors::new(ctx.probe, ctx.features, unlabeled)?;
    let picks = kmeanspp_select(&factors, ctx.batch_size, rng, FirstPick::MaxNorm);
    Ok(picks.into_iter().map(|k| unlabeled[k]).collect())
}

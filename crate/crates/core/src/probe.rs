//! Linear probe: multinomial logistic regression on frozen embeddings.
//!
//! The objective is the mean cross-entropy over the labeled rows plus
//! `‖W‖² / (2 · l2_inverse_strength · n)`; the bias is not penalized. Fits
//! always start from zero parameters, so a fit is a pure function of its
//! inputs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lbfgs::{self, LbfgsOptions, Termination};
use crate::store::{EmbeddingMatrix, LabelVector};

/// Rows of an embedding matrix, either all of them or an index subset.
#[derive(Debug, Clone, Copy)]
pub struct FeatureView<'a> {
    matrix: &'a EmbeddingMatrix,
    rows: Option<&'a [usize]>,
}

impl<'a> FeatureView<'a> {
    pub fn all(matrix: &'a EmbeddingMatrix) -> Self {
        FeatureView { matrix, rows: None }
    }

    pub fn subset(matrix: &'a EmbeddingMatrix, rows: &'a [usize]) -> Self {
        FeatureView {
            matrix,
            rows: Some(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.map_or(self.matrix.rows(), |r| r.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Index into the underlying matrix of the `k`-th row of the view.
    pub fn source_index(&self, k: usize) -> usize {
        self.rows.map_or(k, |r| r[k])
    }

    pub fn row(&self, k: usize) -> &'a [f32] {
        self.matrix.row(self.source_index(k))
    }

    /// Labels of the view's rows, taken from a label vector aligned with the
    /// underlying matrix.
    pub fn gather_labels(&self, labels: &LabelVector) -> Vec<u32> {
        (0..self.len())
            .map(|k| labels.as_slice()[self.source_index(k)])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    classes: usize,
    dim: usize,
    /// C×D, row-major (one row per class).
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ProbeParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ProbeParams {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    pub fn new(classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != classes * dim {
            return Err(Error::DimensionMismatch {
                expected: classes * dim,
                actual: weights.len(),
            });
        }
        if bias.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                actual: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite probe parameter".into()));
        }
        Ok(ProbeParams {
            classes,
            dim,
            weights,
            bias,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    fn from_flat(classes: usize, dim: usize, flat: &[f64]) -> Self {
        let split = classes * dim;
        ProbeParams {
            classes,
            dim,
            weights: flat[..split].to_vec(),
            bias: flat[split..].to_vec(),
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn logits_into(&self, x: &[f32], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let w = self.weight_row(c);
            let mut z = self.bias[c];
            for (wi, &xi) in w.iter().zip(x) {
                z += wi * xi as f64;
            }
            *o = z;
        }
    }

    /// Class probabilities for a single embedding.
    pub fn proba(&self, x: &[f32]) -> Vec<f64> {
        let mut z = vec![0.0; self.classes];
        self.logits_into(x, &mut z);
        softmax_in_place(&mut z);
        z
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: dim,
            });
        }
        Ok(())
    }
}

/// Numerically stable softmax (max-subtracted). Returns log-sum-exp of the
/// input logits.
pub fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub l2_inverse_strength: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            l2_inverse_strength: 1.0,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_inverse_strength.is_finite() && self.l2_inverse_strength > 0.0) {
            return Err(Error::Config("l2_inverse_strength must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        if self.gradient_tolerance.is_nan() || self.gradient_tolerance <= 0.0 {
            return Err(Error::Config("gradient_tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major `rows × classes` probability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

impl Probabilities {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let classes = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        Probabilities {
            rows: n,
            classes,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }
}

pub fn predict_proba(params: &ProbeParams, features: FeatureView<'_>) -> Result<Probabilities> {
    params.check_dim(features.dim())?;
    let c = params.classes;
    let mut data = vec![0.0; features.len() * c];
    data.par_chunks_mut(c.max(1)).enumerate().for_each(|(k, out)| {
        params.logits_into(features.row(k), out);
        softmax_in_place(out);
    });
    Ok(Probabilities {
        rows: features.len(),
        classes: c,
        data,
    })
}

/// Mean cross-entropy over the view and its gradient, without regularization.
pub fn cross_entropy_and_grad(
    params: &ProbeParams,
    features: FeatureView<'_>,
    labels: &[u32],
) -> Result<(f64, ProbeParams)> {
    params.check_dim(features.dim())?;
    if labels.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            actual: labels.len(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= params.classes) {
        return Err(Error::validation("labels", format!("label {y} out of range")));
    }
    let mut flat = vec![0.0; params.classes * (params.dim + 1)];
    let loss = data_term(params, features, labels, &mut flat);
    Ok((loss, ProbeParams::from_flat(params.classes, params.dim, &flat)))
}

/// Regularized objective and its analytic gradient.
pub fn loss_and_grad(
    params: &ProbeParams,
    features: FeatureView<'_>,
    labels: &[u32],
    cfg: &FitConfig,
) -> Result<(f64, ProbeParams)> {
    let (mut loss, mut grad) = cross_entropy_and_grad(params, features, labels)?;
    let lambda = 1.0 / (cfg.l2_inverse_strength * features.len().max(1) as f64);
    for (g, w) in grad.weights.iter_mut().zip(&params.weights) {
        *g += lambda * w;
    }
    loss += 0.5 * lambda * params.weights.iter().map(|w| w * w).sum::<f64>();
    Ok((loss, grad))
}

// Writes the gradient of the mean cross-entropy into `grad` (flat layout:
// weights then bias) and returns the mean cross-entropy.
fn data_term(params: &ProbeParams, features: FeatureView<'_>, labels: &[u32], grad: &mut [f64]) -> f64 {
    let (c, d) = (params.classes, params.dim);
    let n = features.len();
    grad.iter_mut().for_each(|g| *g = 0.0);
    if n == 0 {
        return 0.0;
    }
    let inv_n = 1.0 / n as f64;
    let mut z = vec![0.0; c];
    let mut loss = 0.0;
    for (k, &label) in labels.iter().enumerate() {
        let x = features.row(k);
        let y = label as usize;
        params.logits_into(x, &mut z);
        let zy = z[y];
        let lse = softmax_in_place(&mut z);
        loss += lse - zy;
        z[y] -= 1.0;
        for (cls, &residual) in z.iter().enumerate() {
            let r = residual * inv_n;
            let row = &mut grad[cls * d..(cls + 1) * d];
            for (g, &xi) in row.iter_mut().zip(x) {
                *g += r * xi as f64;
            }
            grad[c * d + cls] += r;
        }
    }
    loss * inv_n
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: ProbeParams,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits the probe from zero initialization.
pub fn fit(
    features: FeatureView<'_>,
    labels: &[u32],
    num_classes: usize,
    cfg: &FitConfig,
) -> Result<FitReport> {
    fit_from(ProbeParams::zeros(num_classes, features.dim()), features, labels, cfg)
}

/// Fits the probe starting from `init`. The benchmark always uses [`fit`];
/// this exists for convexity checks.
pub fn fit_from(
    init: ProbeParams,
    features: FeatureView<'_>,
    labels: &[u32],
    cfg: &FitConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    init.check_dim(features.dim())?;
    if features.is_empty() {
        return Err(Error::validation("labeled", "cannot fit on an empty labeled set"));
    }
    if labels.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            actual: labels.len(),
        });
    }
    let (c, d) = (init.classes, init.dim);
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= c) {
        return Err(Error::validation("labels", format!("label {y} out of range")));
    }

    let lambda = 1.0 / (cfg.l2_inverse_strength * features.len() as f64);
    let objective = |theta: &[f64], grad: &mut [f64]| {
        let p = ProbeParams::from_flat(c, d, theta);
        let mut loss = data_term(&p, features, labels, grad);
        let mut sq = 0.0;
        for (g, w) in grad[..c * d].iter_mut().zip(&theta[..c * d]) {
            *g += lambda * w;
            sq += w * w;
        }
        loss += 0.5 * lambda * sq;
        loss
    };
    let opts = LbfgsOptions {
        max_iterations: cfg.max_iterations,
        gradient_tolerance: cfg.gradient_tolerance,
        ..LbfgsOptions::default()
    };
    let min = lbfgs::minimize(init.to_flat(), objective, &opts)?;
    Ok(FitReport {
        params: ProbeParams::from_flat(c, d, &min.x),
        loss: min.value,
        iterations: min.iterations,
        converged: min.termination != Termination::MaxIterations,
    })
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate_accuracy(
    params: &ProbeParams,
    test: FeatureView<'_>,
    test_labels: &[u32],
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::validation("test", "empty test set"));
    }
    if test_labels.len() != test.len() {
        return Err(Error::DimensionMismatch {
            expected: test.len(),
            actual: test_labels.len(),
        });
    }
    let probs = predict_proba(params, test)?;
    let correct = (0..test.len())
        .filter(|&k| probs.argmax(k) == test_labels[k] as usize)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

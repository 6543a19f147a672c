//! Synthetic Gaussian-blob datasets for tests, demos and trend checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{DatasetManifest, EmbeddingDataset, EmbeddingMatrix, LabelVector, Pooling};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub dataset_name: String,
    pub model_name: String,
    pub num_classes: usize,
    pub dim: usize,
    pub num_train: usize,
    pub num_test: usize,
    /// Standard deviation of the class centers around the origin.
    pub center_scale: f64,
    /// Per-coordinate noise around each center.
    pub noise_std: f64,
    /// Relative class frequencies; uniform when empty.
    pub class_weights: Vec<f64>,
    pub budget: usize,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            dataset_name: "blobs".into(),
            model_name: "synthetic".into(),
            num_classes: 4,
            dim: 16,
            num_train: 2000,
            num_test: 500,
            center_scale: 1.0,
            noise_std: 1.0,
            class_weights: Vec::new(),
            budget: 200,
            seed: 0,
        }
    }
}

pub fn gaussian_blobs(spec: &BlobSpec) -> Result<EmbeddingDataset> {
    if spec.num_classes < 2 || spec.dim == 0 {
        return Err(Error::Config("blobs need ≥ 2 classes and ≥ 1 dimension".into()));
    }
    let weights = if spec.class_weights.is_empty() {
        vec![1.0; spec.num_classes]
    } else if spec.class_weights.len() == spec.num_classes && spec.class_weights.iter().all(|&w| w > 0.0) {
        spec.class_weights.clone()
    } else {
        return Err(Error::Config("class_weights must have one positive entry per class".into()));
    };
    let total: f64 = weights.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<f64> = (0..spec.num_classes * spec.dim)
        .map(|_| spec.center_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let draw = |n: usize, rng: &mut ChaCha8Rng| {
        let mut data = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut u = rng.random::<f64>() * total;
            let mut class = spec.num_classes - 1;
            for (c, &w) in weights.iter().enumerate() {
                if u < w {
                    class = c;
                    break;
                }
                u -= w;
            }
            labels.push(class as u32);
            let center = &centers[class * spec.dim..(class + 1) * spec.dim];
            data.extend(
                center
                    .iter()
                    .map(|&m| (m + spec.noise_std * rng.sample::<f64, _>(StandardNormal)) as f32),
            );
        }
        (data, labels)
    };
    let (train, train_labels) = draw(spec.num_train, &mut rng);
    let (test, test_labels) = draw(spec.num_test, &mut rng);

    let manifest = DatasetManifest {
        dataset_name: spec.dataset_name.clone(),
        model_name: spec.model_name.clone(),
        pooling: Pooling::Mean,
        num_train: spec.num_train,
        num_test: spec.num_test,
        num_classes: spec.num_classes,
        embedding_dim: spec.dim,
        budget: spec.budget,
        source_checksum: String::new(),
    };
    EmbeddingDataset::new(
        manifest,
        EmbeddingMatrix::new(spec.num_train, spec.dim, train)?,
        LabelVector::new(train_labels),
        EmbeddingMatrix::new(spec.num_test, spec.dim, test)?,
        LabelVector::new(test_labels),
    )
}

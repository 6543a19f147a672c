//! On-disk embedding datasets.
//!
//! A dataset directory holds `manifest.json` plus four binary payloads:
//! `train.emb`, `train.lbl`, `test.emb`, `test.lbl`. Embedding files carry a
//! 21-byte header (`ALEB`, u32 version, u64 rows, u32 dim, u8 dtype) followed
//! by little-endian f32 values; label files carry a 16-byte header (`ALLB`,
//! u32 version, u64 rows) followed by little-endian u32 class indices.
//!
//! `source_checksum` is the SHA-256 of the four payload files concatenated in
//! the order listed above.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_EMB: &str = "train.emb";
pub const TRAIN_LBL: &str = "train.lbl";
pub const TEST_EMB: &str = "test.emb";
pub const TEST_LBL: &str = "test.lbl";

const EMB_MAGIC: &[u8; 4] = b"ALEB";
const LBL_MAGIC: &[u8; 4] = b"ALLB";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const EMB_HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1;
const LBL_HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    #[serde(rename = "CLS")]
    Cls,
    #[serde(rename = "EOS")]
    Eos,
    #[serde(rename = "MEAN")]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub model_name: String,
    pub pooling: Pooling,
    pub num_train: usize,
    pub num_test: usize,
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub budget: usize,
    #[serde(default)]
    pub source_checksum: String,
}

impl DatasetManifest {
    fn validate_self(&self) -> Result<()> {
        if self.num_train < 1 {
            return Err(Error::validation("num_train", "num_train must be ≥ 1"));
        }
        if self.num_test < 1 {
            return Err(Error::validation("num_test", "num_test must be ≥ 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes", "num_classes must be ≥ 2"));
        }
        if self.embedding_dim < 1 {
            return Err(Error::validation("embedding_dim", "embedding_dim must be ≥ 1"));
        }
        if self.budget > self.num_train {
            return Err(Error::validation(
                "budget",
                format!("budget {} exceeds num_train {}", self.budget, self.num_train),
            ));
        }
        Ok(())
    }
}

/// Dense row-major f32 matrix; one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding_dim", "dimension must be ≥ 1"));
        }
        if data.len() != rows * dim {
            return Err(Error::validation(
                "data",
                format!("expected {} values for {rows}×{dim}, got {}", rows * dim, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                "data",
                format!("non-finite value at row {}, column {}", pos / dim, pos % dim),
            ));
        }
        Ok(EmbeddingMatrix { rows, dim, data })
    }

    /// Builds a matrix from nested rows. Convenient for fixtures.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::validation(
                    "data",
                    format!("row {i} has {} columns, expected {dim}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Copy with every row scaled to unit Euclidean norm. Zero rows stay zero.
    pub fn unit_normalized(&self) -> EmbeddingMatrix {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.dim) {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
        EmbeddingMatrix {
            rows: self.rows,
            dim: self.dim,
            data,
        }
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            rows: indices.len(),
            dim: self.dim,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<u32>);

impl LabelVector {
    pub fn new(values: Vec<u32>) -> Self {
        LabelVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn get(&self, i: usize) -> usize {
        self.0[i] as usize
    }

    fn check_range(&self, num_classes: usize, field: &str) -> Result<()> {
        if let Some((i, v)) = self
            .0
            .iter()
            .enumerate()
            .find(|(_, &v)| v as usize >= num_classes)
        {
            return Err(Error::validation(
                field,
                format!("label out of range: entry {i} is {v}, num_classes is {num_classes}"),
            ));
        }
        Ok(())
    }
}

/// A frozen embedding dataset: manifest, train/test features and labels.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    pub manifest: DatasetManifest,
    pub train: EmbeddingMatrix,
    pub train_labels: LabelVector,
    pub test: EmbeddingMatrix,
    pub test_labels: LabelVector,
}

impl EmbeddingDataset {
    /// Assembles a dataset in memory, checking every invariant. The manifest
    /// checksum is recomputed from the payloads.
    pub fn new(
        mut manifest: DatasetManifest,
        train: EmbeddingMatrix,
        train_labels: LabelVector,
        test: EmbeddingMatrix,
        test_labels: LabelVector,
    ) -> Result<Self> {
        validate_parts(&manifest, &train, &train_labels, &test, &test_labels)?;
        manifest.source_checksum = checksum_parts(&train, &train_labels, &test, &test_labels);
        Ok(EmbeddingDataset {
            manifest,
            train,
            train_labels,
            test,
            test_labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn num_train(&self) -> usize {
        self.train.rows()
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    /// Re-hashes the in-memory payloads. Equal to `manifest.source_checksum`
    /// as long as nothing mutated the data.
    pub fn payload_checksum(&self) -> String {
        checksum_parts(&self.train, &self.train_labels, &self.test, &self.test_labels)
    }
}

fn validate_parts(
    manifest: &DatasetManifest,
    train: &EmbeddingMatrix,
    train_labels: &LabelVector,
    test: &EmbeddingMatrix,
    test_labels: &LabelVector,
) -> Result<()> {
    manifest.validate_self()?;
    if train.rows() != manifest.num_train {
        return Err(Error::validation(
            "num_train",
            format!("manifest says {}, train matrix has {} rows", manifest.num_train, train.rows()),
        ));
    }
    if test.rows() != manifest.num_test {
        return Err(Error::validation(
            "num_test",
            format!("manifest says {}, test matrix has {} rows", manifest.num_test, test.rows()),
        ));
    }
    for (m, name) in [(train, "train"), (test, "test")] {
        if m.dim() != manifest.embedding_dim {
            return Err(Error::validation(
                "embedding_dim",
                format!("manifest says {}, {name} matrix has {}", manifest.embedding_dim, m.dim()),
            ));
        }
    }
    if train_labels.len() != train.rows() {
        return Err(Error::validation(
            "train_labels",
            format!("{} labels for {} rows", train_labels.len(), train.rows()),
        ));
    }
    if test_labels.len() != test.rows() {
        return Err(Error::validation(
            "test_labels",
            format!("{} labels for {} rows", test_labels.len(), test.rows()),
        ));
    }
    train_labels.check_range(manifest.num_classes, "train_labels")?;
    test_labels.check_range(manifest.num_classes, "test_labels")?;
    Ok(())
}

fn encode_embeddings(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(EMB_HEADER_LEN + m.data.len() * 4);
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(m.dim as u32).to_le_bytes());
    buf.push(DTYPE_F32);
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn encode_labels(l: &LabelVector) -> Vec<u8> {
    let mut buf = Vec::with_capacity(LBL_HEADER_LEN + l.0.len() * 4);
    buf.extend_from_slice(LBL_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(l.0.len() as u64).to_le_bytes());
    for v in &l.0 {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn checksum_parts(
    train: &EmbeddingMatrix,
    train_labels: &LabelVector,
    test: &EmbeddingMatrix,
    test_labels: &LabelVector,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(encode_embeddings(train));
    hasher.update(encode_labels(train_labels));
    hasher.update(encode_embeddings(test));
    hasher.update(encode_labels(test_labels));
    hex::encode(hasher.finalize())
}

fn shape_err(file: &str, message: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        file: file.to_string(),
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

fn check_emb_shape(bytes: &[u8], file: &str, rows: usize, dim: usize) -> Result<()> {
    if bytes.len() < EMB_HEADER_LEN {
        return Err(shape_err(file, "file shorter than header"));
    }
    if &bytes[..4] != EMB_MAGIC {
        return Err(shape_err(file, "bad magic bytes, expected ALEB"));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(shape_err(file, format!("unsupported version {version}")));
    }
    let n = read_u64(bytes, 8) as usize;
    let d = read_u32(bytes, 16) as usize;
    let dtype = bytes[20];
    if dtype != DTYPE_F32 {
        return Err(shape_err(file, format!("unsupported dtype code {dtype}")));
    }
    if n != rows || d != dim {
        return Err(shape_err(
            file,
            format!("header says {n}×{d}, manifest says {rows}×{dim}"),
        ));
    }
    let expected = EMB_HEADER_LEN + n * d * 4;
    if bytes.len() != expected {
        return Err(shape_err(
            file,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(())
}

fn check_lbl_shape(bytes: &[u8], file: &str, rows: usize) -> Result<()> {
    if bytes.len() < LBL_HEADER_LEN {
        return Err(shape_err(file, "file shorter than header"));
    }
    if &bytes[..4] != LBL_MAGIC {
        return Err(shape_err(file, "bad magic bytes, expected ALLB"));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(shape_err(file, format!("unsupported version {version}")));
    }
    let n = read_u64(bytes, 8) as usize;
    if n != rows {
        return Err(shape_err(file, format!("header says {n} rows, manifest says {rows}")));
    }
    let expected = LBL_HEADER_LEN + n * 4;
    if bytes.len() != expected {
        return Err(shape_err(
            file,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(())
}

// Callers must have run `check_emb_shape` first.
fn decode_embeddings(bytes: &[u8], rows: usize, dim: usize) -> Result<EmbeddingMatrix> {
    let data = bytes[EMB_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(rows, dim, data)
}

fn decode_labels(bytes: &[u8]) -> LabelVector {
    LabelVector(
        bytes[LBL_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a dataset directory and returns the manifest as written (with its
/// checksum filled in).
pub fn write_dataset(
    manifest: &DatasetManifest,
    train: &EmbeddingMatrix,
    train_labels: &LabelVector,
    test: &EmbeddingMatrix,
    test_labels: &LabelVector,
    path: &Path,
) -> Result<DatasetManifest> {
    validate_parts(manifest, train, train_labels, test, test_labels)?;
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;

    let payloads = [
        (TRAIN_EMB, encode_embeddings(train)),
        (TRAIN_LBL, encode_labels(train_labels)),
        (TEST_EMB, encode_embeddings(test)),
        (TEST_LBL, encode_labels(test_labels)),
    ];
    let mut hasher = Sha256::new();
    for (name, bytes) in &payloads {
        hasher.update(bytes);
        write_file(&path.join(name), bytes)?;
    }

    let mut manifest = manifest.clone();
    manifest.source_checksum = hex::encode(hasher.finalize());
    let text = serde_json::to_string_pretty(&manifest)?;
    write_file(&path.join(MANIFEST_FILE), format!("{text}\n").as_bytes())?;
    Ok(manifest)
}

/// Convenience wrapper around [`write_dataset`] for an assembled dataset.
pub fn save(dataset: &EmbeddingDataset, path: &Path) -> Result<DatasetManifest> {
    write_dataset(
        &dataset.manifest,
        &dataset.train,
        &dataset.train_labels,
        &dataset.test,
        &dataset.test_labels,
        path,
    )
}

fn read_file(path: PathBuf) -> Result<Vec<u8>> {
    match fs::read(&path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path)),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let manifest_path = path.join(MANIFEST_FILE);
    let text = read_file(manifest_path.clone())?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| Error::Manifest {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
    manifest.validate_self()?;

    let train_emb = read_file(path.join(TRAIN_EMB))?;
    let train_lbl = read_file(path.join(TRAIN_LBL))?;
    let test_emb = read_file(path.join(TEST_EMB))?;
    let test_lbl = read_file(path.join(TEST_LBL))?;

    // Shapes first so a truncated payload reports as such rather than as a
    // checksum failure.
    let d = manifest.embedding_dim;
    check_emb_shape(&train_emb, TRAIN_EMB, manifest.num_train, d)?;
    check_lbl_shape(&train_lbl, TRAIN_LBL, manifest.num_train)?;
    check_emb_shape(&test_emb, TEST_EMB, manifest.num_test, d)?;
    check_lbl_shape(&test_lbl, TEST_LBL, manifest.num_test)?;

    let mut hasher = Sha256::new();
    for bytes in [&train_emb, &train_lbl, &test_emb, &test_lbl] {
        hasher.update(bytes);
    }
    let actual = hex::encode(hasher.finalize());
    if actual != manifest.source_checksum {
        return Err(Error::ChecksumMismatch {
            file: path.display().to_string(),
            expected: manifest.source_checksum.clone(),
            actual,
        });
    }

    let train = decode_embeddings(&train_emb, manifest.num_train, d)?;
    let train_labels = decode_labels(&train_lbl);
    let test = decode_embeddings(&test_emb, manifest.num_test, d)?;
    let test_labels = decode_labels(&test_lbl);
    validate_parts(&manifest, &train, &train_labels, &test, &test_labels)?;
    Ok(EmbeddingDataset {
        manifest,
        train,
        train_labels,
        test,
        test_labels,
    })
}

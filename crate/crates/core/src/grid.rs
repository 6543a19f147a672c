//! Experiment grids and IPS sweeps driven by JSON configs, with on-disk outputs.
//!
//! An output directory holds `config.resolved.json` (written before any work
//! starts), `results.csv` sorted by key, `errors.json` and `run_manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ips::IpsStrategy;
use crate::probe::FitConfig;
use crate::query::{QueryStrategy, StrategyParams};
use crate::runner::{self, CellError, DeltaCache, ExperimentConfig, ResultsTable};
use crate::store::{self, EmbeddingDataset};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const ERRORS_FILE: &str = "errors.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
/// Caps worker threads when set.
pub const THREADS_ENV: &str = "ALFORGE_THREADS";

pub const DEFAULT_SWEEP_SIZES: [usize; 8] = [20, 50, 100, 250, 500, 1000, 2500, 5000];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetOverride {
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub k0: Option<usize>,
}

fn default_ips() -> Vec<IpsStrategy> {
    vec![IpsStrategy::Random, IpsStrategy::TypiClust]
}

fn default_strategies() -> Vec<QueryStrategy> {
    QueryStrategy::ALL.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Dataset directories; relative paths resolve against the config file.
    pub datasets: Vec<PathBuf>,
    #[serde(default = "default_ips")]
    pub ips: Vec<IpsStrategy>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<QueryStrategy>,
    #[serde(default = "runner::default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    /// Keyed by manifest `dataset_name`.
    #[serde(default)]
    pub overrides: BTreeMap<String, DatasetOverride>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; all cores when absent.
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub params: StrategyParams,
    #[serde(default)]
    pub fit: FitConfig,
}

fn default_cycles() -> usize {
    runner::DEFAULT_CYCLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub datasets: Vec<PathBuf>,
    #[serde(default = "default_ips")]
    pub ips: Vec<IpsStrategy>,
    /// Initial pool sizes. When absent, the default sizes that fit each
    /// dataset are used.
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    #[serde(default = "runner::default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub params: StrategyParams,
    #[serde(default)]
    pub fit: FitConfig,
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn check_distinct<T: Ord + std::fmt::Debug>(field: &str, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Config(format!("`{field}` must not be empty")));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = items.iter().find(|x| !seen.insert(*x)) {
        return Err(Error::Config(format!("`{field}` lists {dup:?} twice")));
    }
    Ok(())
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<GridConfig> {
        let mut cfg: GridConfig = read_config(path)?;
        let base = base_dir(path);
        cfg.datasets = cfg.datasets.iter().map(|d| resolve(&base, d)).collect();
        cfg.output_dir = resolve(&base, &cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_distinct("datasets", &self.datasets)?;
        check_distinct("ips", &self.ips)?;
        check_distinct("strategies", &self.strategies)?;
        check_distinct("seeds", &self.seeds)?;
        if self.parallelism == Some(0) {
            return Err(Error::Config("`parallelism` must be ≥ 1".into()));
        }
        self.params.validate()?;
        self.fit.validate()
    }
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<SweepConfig> {
        let mut cfg: SweepConfig = read_config(path)?;
        let base = base_dir(path);
        cfg.datasets = cfg.datasets.iter().map(|d| resolve(&base, d)).collect();
        cfg.output_dir = resolve(&base, &cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_distinct("datasets", &self.datasets)?;
        check_distinct("ips", &self.ips)?;
        check_distinct("seeds", &self.seeds)?;
        if let Some(sizes) = &self.sizes {
            check_distinct("sizes", sizes)?;
        }
        if self.parallelism == Some(0) {
            return Err(Error::Config("`parallelism` must be ≥ 1".into()));
        }
        self.params.validate()?;
        self.fit.validate()
    }
}

/// Requested parallelism, capped by `ALFORGE_THREADS` when that is a
/// positive integer.
pub fn effective_threads(requested: Option<usize>) -> usize {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    let want = requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.map_or(want, |c| want.min(c)).max(1)
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    /// At least one cell failed; the rest of the table is intact.
    Partial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub rows: usize,
    pub errors: Vec<CellError>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub path: PathBuf,
    pub dataset_name: String,
    pub model_name: String,
    pub source_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub config_hash: String,
    pub tool_version: String,
    pub threads: usize,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub datasets: Vec<DatasetRecord>,
    pub rows: usize,
    pub failed_cells: usize,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// sha256 of the resolved config's canonical JSON.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<EmbeddingDataset>> {
    let datasets = paths.iter().map(|p| store::load_dataset(p)).collect::<Result<Vec<_>>>()?;
    let mut names = BTreeSet::new();
    for d in &datasets {
        if !names.insert((&d.manifest.dataset_name, &d.manifest.model_name)) {
            return Err(Error::Config(format!(
                "two datasets share name {} and model {}",
                d.manifest.dataset_name, d.manifest.model_name
            )));
        }
    }
    Ok(datasets)
}

fn records(paths: &[PathBuf], datasets: &[EmbeddingDataset]) -> Vec<DatasetRecord> {
    paths
        .iter()
        .zip(datasets)
        .map(|(p, d)| DatasetRecord {
            path: p.clone(),
            dataset_name: d.manifest.dataset_name.clone(),
            model_name: d.manifest.model_name.clone(),
            source_checksum: d.manifest.source_checksum.clone(),
        })
        .collect()
}

fn prepare_output(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn finish(
    kind: &str,
    dir: &Path,
    hash: String,
    threads: usize,
    started: u128,
    datasets: Vec<DatasetRecord>,
    table: ResultsTable,
) -> Result<RunSummary> {
    table.check_unique()?;
    let results = dir.join(RESULTS_FILE);
    let file = fs::File::create(&results).map_err(|e| Error::io(&results, e))?;
    table.write_csv(std::io::BufWriter::new(file))?;
    write_json(&dir.join(ERRORS_FILE), &table.errors)?;
    write_json(
        &dir.join(RUN_MANIFEST_FILE),
        &RunManifest {
            kind: kind.into(),
            config_hash: hash,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            threads,
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
            datasets,
            rows: table.rows.len(),
            failed_cells: table.errors.len(),
        },
    )?;
    for e in &table.errors {
        log::error!("{}/{} {} {} seed {}: {}", e.dataset, e.model, e.ips, e.strategy, e.seed, e.message);
    }
    Ok(RunSummary {
        output_dir: dir.to_path_buf(),
        rows: table.rows.len(),
        outcome: if table.errors.is_empty() { Outcome::Complete } else { Outcome::Partial },
        errors: table.errors,
    })
}

/// Runs every (dataset, ips, strategy, seed) cell of the grid. Input problems
/// fail the whole run before any result is written; a failing cell is
/// recorded and its siblings proceed.
pub fn run_grid(cfg: &GridConfig) -> Result<RunSummary> {
    let started = now_ms();
    cfg.validate()?;
    let datasets = load_all(&cfg.datasets)?;
    for name in cfg.overrides.keys() {
        if !datasets.iter().any(|d| &d.manifest.dataset_name == name) {
            return Err(Error::Config(format!("override for unknown dataset `{name}`")));
        }
    }

    let deltas = DeltaCache::default();
    let mut cells = Vec::new();
    for (d, ds) in datasets.iter().enumerate() {
        let ov = cfg.overrides.get(&ds.manifest.dataset_name).cloned().unwrap_or_default();
        for &ips in &cfg.ips {
            for &strategy in &cfg.strategies {
                let exp = ExperimentConfig {
                    params: cfg.params.clone(),
                    cycles: cfg.cycles,
                    budget: ov.budget,
                    k0: ov.k0,
                    seeds: cfg.seeds.clone(),
                    fit: cfg.fit,
                    ..ExperimentConfig::new(ips, strategy)
                };
                let (schedule, delta) = runner::prepare(ds, &exp, &deltas)?;
                cells.push((d, exp, schedule, delta));
            }
        }
    }

    prepare_output(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(RESOLVED_CONFIG_FILE), cfg)?;
    let threads = effective_threads(cfg.parallelism);
    log::info!("running {} cells × {} seeds on {threads} threads", cells.len(), cfg.seeds.len());

    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
    let parts: Vec<ResultsTable> = with_threads(threads, || {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let (d, exp, schedule, delta) = &cells[c];
                runner::run_cell(&datasets[*d], exp, schedule, seed, *delta)
            })
            .collect()
    })?;
    let mut table = ResultsTable::default();
    for p in parts {
        table.extend(p);
    }
    table.sort();
    finish("grid", &cfg.output_dir, config_hash(cfg)?, threads, started, records(&cfg.datasets, &datasets), table)
}

/// Initial-pool-only sweep over (dataset, ips, size, seed).
pub fn run_sweep(cfg: &SweepConfig) -> Result<RunSummary> {
    let started = now_ms();
    cfg.validate()?;
    let datasets = load_all(&cfg.datasets)?;
    let mut resolved = cfg.clone();
    let sizes: Vec<Vec<usize>> = datasets
        .iter()
        .map(|ds| match &cfg.sizes {
            Some(s) => Ok(s.clone()),
            None => {
                let fit: Vec<usize> = DEFAULT_SWEEP_SIZES.iter().copied().filter(|&k| k <= ds.num_train()).collect();
                if fit.is_empty() {
                    Err(Error::Config(format!(
                        "no default sweep size fits {} ({} training points)",
                        ds.manifest.dataset_name,
                        ds.num_train()
                    )))
                } else {
                    Ok(fit)
                }
            }
        })
        .collect::<Result<_>>()?;
    if cfg.sizes.is_none() && sizes.windows(2).all(|w| w[0] == w[1]) {
        resolved.sizes = sizes.first().cloned();
    }

    prepare_output(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(RESOLVED_CONFIG_FILE), &resolved)?;
    let threads = effective_threads(cfg.parallelism);
    let mut table = with_threads(threads, || -> Result<ResultsTable> {
        let mut table = ResultsTable::default();
        for (ds, sizes) in datasets.iter().zip(&sizes) {
            table.extend(runner::run_ips_sweep(ds, &cfg.ips, sizes, &cfg.seeds, &cfg.fit, &cfg.params)?);
        }
        Ok(table)
    })??;
    table.sort();
    finish("sweep", &cfg.output_dir, config_hash(&resolved)?, threads, started, records(&cfg.datasets, &datasets), table)
}

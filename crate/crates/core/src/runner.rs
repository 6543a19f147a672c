//! Experiment driver: initial pool, AL cycles, IPS-only sweeps, result tables.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ips::{self, IpsConfig, IpsStrategy, PoolState};
use crate::probe::{self, FeatureView, FitConfig};
use crate::query::{self, DeltaSetting, QueryContext, QueryStrategy, StrategyParams};
use crate::seeding;
use crate::store::EmbeddingDataset;

pub const DEFAULT_CYCLES: usize = 20;
pub const RESULTS_HEADER: &str = "dataset,model,ips,strategy,seed,cycle,labeled_size,accuracy,wall_ms";
/// Strategy column value for IPS-only sweep rows.
pub const NO_QUERY: &str = "none";

pub fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

/// Splits a total budget over `cycles` equal batches plus an initial pool:
/// `b = ⌊B / (T + 1)⌋`, `k0 = B − T·b`.
pub fn derive_batch_size(budget: usize, cycles: usize) -> Result<(usize, usize)> {
    if budget < cycles + 1 {
        return Err(Error::Config(format!(
            "budget {budget} is smaller than cycles + 1 = {}",
            cycles + 1
        )));
    }
    let b = budget / (cycles + 1);
    Ok((budget - cycles * b, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub ips: IpsStrategy,
    pub strategy: QueryStrategy,
    #[serde(default)]
    pub params: StrategyParams,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    /// Defaults to the manifest budget.
    #[serde(default)]
    pub budget: Option<usize>,
    /// Overrides the derived initial pool size.
    #[serde(default)]
    pub k0: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub fit: FitConfig,
}

fn default_cycles() -> usize {
    DEFAULT_CYCLES
}

impl ExperimentConfig {
    pub fn new(ips: IpsStrategy, strategy: QueryStrategy) -> Self {
        ExperimentConfig {
            ips,
            strategy,
            params: StrategyParams::default(),
            cycles: DEFAULT_CYCLES,
            budget: None,
            k0: None,
            seeds: default_seeds(),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub k0: usize,
    pub batch_size: usize,
    pub cycles: usize,
}

impl Schedule {
    pub fn total_labels(&self) -> usize {
        self.k0 + self.cycles * self.batch_size
    }
}

pub fn resolve_schedule(dataset: &EmbeddingDataset, cfg: &ExperimentConfig) -> Result<Schedule> {
    let budget = cfg.budget.unwrap_or(dataset.manifest.budget);
    let t = cfg.cycles;
    let (k0, b) = match cfg.k0 {
        Some(k0) => {
            if k0 > budget {
                return Err(Error::Config(format!("k0 {k0} exceeds budget {budget}")));
            }
            (k0, (budget - k0).checked_div(t).unwrap_or(0))
        }
        None => derive_batch_size(budget, t)?,
    };
    let s = Schedule {
        k0,
        batch_size: b,
        cycles: t,
    };
    if k0 == 0 {
        return Err(Error::Config("initial pool must not be empty".into()));
    }
    if t > 0 && b == 0 {
        return Err(Error::Config("batch size must be ≥ 1".into()));
    }
    if s.total_labels() > dataset.num_train() {
        return Err(Error::Config(format!(
            "k0 + T·b = {} exceeds num_train {}",
            s.total_labels(),
            dataset.num_train()
        )));
    }
    Ok(s)
}

/// One measurement: a probe fitted on the labeled pool after `cycle` queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub seed: u64,
    pub cycle: usize,
    pub labeled_size: usize,
    pub test_accuracy: f64,
    pub batch: Vec<usize>,
    pub probe_iterations: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub ips: String,
    pub strategy: String,
    pub seed: u64,
    pub cycle: usize,
    pub labeled_size: usize,
    pub accuracy: f64,
    pub wall_ms: u64,
}

impl ResultRow {
    pub fn key(&self) -> (&str, &str, &str, &str, u64, usize) {
        (&self.dataset, &self.model, &self.ips, &self.strategy, self.seed, self.cycle)
    }

    /// Sweep rows all sit at cycle 0, so their identity is the pool size.
    pub fn unique_key(&self) -> (&str, &str, &str, &str, u64, usize) {
        let slot = if self.strategy == NO_QUERY { self.labeled_size } else { self.cycle };
        (&self.dataset, &self.model, &self.ips, &self.strategy, self.seed, slot)
    }

    fn sort_key(&self) -> (&str, &str, &str, &str, u64, usize, usize) {
        let (d, m, i, s, seed, c) = self.key();
        (d, m, i, s, seed, c, self.labeled_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub dataset: String,
    pub model: String,
    pub ips: String,
    pub strategy: String,
    pub seed: u64,
    pub message: String,
}

/// The (dataset, model, ips, strategy, seed, cycle) → accuracy relation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub errors: Vec<CellError>,
}

impl ResultsTable {
    pub fn extend(&mut self, other: ResultsTable) {
        self.rows.extend(other.rows);
        self.errors.extend(other.errors);
    }

    /// Orders rows by key so that output bytes never depend on scheduling.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        self.errors.sort_by(|a, b| {
            (&a.dataset, &a.model, &a.ips, &a.strategy, a.seed).cmp(&(&b.dataset, &b.model, &b.ips, &b.strategy, b.seed))
        });
    }

    pub fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.rows {
            if !seen.insert(r.unique_key()) {
                return Err(Error::Analysis(format!("duplicate result key {:?}", r.unique_key())));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Analysis(format!("writing results: {e}"));
        out.write_record(RESULTS_HEADER.split(',')).map_err(io)?;
        for r in &self.rows {
            out.write_record([
                r.dataset.clone(),
                r.model.clone(),
                r.ips.clone(),
                r.strategy.clone(),
                r.seed.to_string(),
                r.cycle.to_string(),
                r.labeled_size.to_string(),
                r.accuracy.to_string(),
                r.wall_ms.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush().map_err(|e| Error::Analysis(format!("writing results: {e}")))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<ResultsTable> {
        let mut reader = csv::Reader::from_reader(r);
        let bad = |e: String| Error::Analysis(format!("reading results: {e}"));
        let header = reader.headers().map_err(|e| bad(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
        if header != RESULTS_HEADER {
            return Err(bad(format!("unexpected header `{header}`")));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or_default().to_string();
            let num = |i: usize| -> Result<u64> { field(i).parse().map_err(|e| bad(format!("column {i}: {e}"))) };
            rows.push(ResultRow {
                dataset: field(0),
                model: field(1),
                ips: field(2),
                strategy: field(3),
                seed: num(4)?,
                cycle: num(5)? as usize,
                labeled_size: num(6)? as usize,
                accuracy: field(7).parse().map_err(|e| bad(format!("accuracy: {e}")))?,
                wall_ms: num(8)?,
            });
        }
        Ok(ResultsTable { rows, errors: Vec::new() })
    }
}

/// Resolved ProbCover radii keyed by dataset checksum.
#[derive(Debug, Default)]
pub struct DeltaCache(Mutex<HashMap<String, f64>>);

impl DeltaCache {
    /// Radius for `dataset`, estimating it on first use from a stream that
    /// does not depend on the experiment seed.
    pub fn resolve(&self, dataset: &EmbeddingDataset, params: &StrategyParams) -> Result<f64> {
        if let DeltaSetting::Fixed(d) = params.probcover_delta {
            return Ok(d);
        }
        let key = format!(
            "{}:{}:{}",
            dataset.manifest.source_checksum, params.probcover_normalize, params.probcover_purity_threshold
        );
        let mut guard = self.0.lock().expect("delta cache poisoned");
        if let Some(&d) = guard.get(&key) {
            return Ok(d);
        }
        let features = if params.probcover_normalize {
            dataset.train.unit_normalized()
        } else {
            dataset.train.clone()
        };
        let mut rng = seeding::stream(0, QueryStrategy::ProbCover.name(), "delta");
        let est = query::estimate_probcover_delta(
            &features,
            dataset.num_classes(),
            params.probcover_purity_threshold,
            &mut rng,
        )?;
        guard.insert(key, est.delta);
        Ok(est.delta)
    }
}

/// Runs all cycles for one seed.
pub fn run_seed(
    dataset: &EmbeddingDataset,
    cfg: &ExperimentConfig,
    schedule: &Schedule,
    seed: u64,
    probcover_delta: Option<f64>,
) -> Result<Vec<CycleRecord>> {
    let n = dataset.num_train();
    let c = dataset.num_classes();
    let test = FeatureView::all(&dataset.test);
    let fit_and_score = |pool: &PoolState| -> Result<(probe::FitReport, f64)> {
        let view = FeatureView::subset(&dataset.train, pool.labeled());
        let labels = view.gather_labels(&dataset.train_labels);
        let report = probe::fit(view, &labels, c, &cfg.fit)?;
        let acc = probe::evaluate_accuracy(&report.params, test, dataset.test_labels.as_slice())?;
        Ok((report, acc))
    };

    let started = Instant::now();
    let ips_cfg = IpsConfig {
        strategy: cfg.ips,
        k0: schedule.k0,
        seed,
        typiclust_knn: cfg.params.typiclust_knn,
        typiclust_max_clusters: cfg.params.typiclust_max_clusters,
    };
    let initial = ips::select_initial(dataset, &ips_cfg)?;
    let mut pool = PoolState::new(n, &initial)?;
    let (mut report, acc) = fit_and_score(&pool)?;
    let mut records = vec![CycleRecord {
        seed,
        cycle: 0,
        labeled_size: pool.labeled().len(),
        test_accuracy: acc,
        batch: initial,
        probe_iterations: report.iterations,
        wall_ms: started.elapsed().as_millis() as u64,
    }];

    let mut rng = seeding::stream(seed, cfg.strategy.name(), "query");
    for t in 1..=schedule.cycles {
        let started = Instant::now();
        let ctx = QueryContext {
            features: &dataset.train,
            num_classes: c,
            pool: &pool,
            probe: &report.params,
            batch_size: schedule.batch_size,
            params: &cfg.params,
            probcover_delta,
        };
        let batch = query::select_batch(cfg.strategy, &ctx, &mut rng)?;
        pool.label_batch(&batch)?;
        pool.check_partition()?;
        let expected = schedule.k0 + t * schedule.batch_size;
        if pool.labeled().len() != expected {
            return Err(Error::Strategy {
                strategy: cfg.strategy.name().into(),
                message: format!("labeled pool has {} points after cycle {t}, expected {expected}", pool.labeled().len()),
            });
        }
        let (next, acc) = fit_and_score(&pool)?;
        report = next;
        records.push(CycleRecord {
            seed,
            cycle: t,
            labeled_size: pool.labeled().len(),
            test_accuracy: acc,
            batch,
            probe_iterations: report.iterations,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(records)
}

fn to_rows(dataset: &EmbeddingDataset, ips: &str, strategy: &str, records: &[CycleRecord]) -> Vec<ResultRow> {
    records
        .iter()
        .map(|r| ResultRow {
            dataset: dataset.manifest.dataset_name.clone(),
            model: dataset.manifest.model_name.clone(),
            ips: ips.to_string(),
            strategy: strategy.to_string(),
            seed: r.seed,
            cycle: r.cycle,
            labeled_size: r.labeled_size,
            accuracy: r.test_accuracy,
            wall_ms: r.wall_ms,
        })
        .collect()
}

/// Validates the configuration shared by every seed of an experiment and
/// resolves the ProbCover radius when needed.
pub fn prepare(dataset: &EmbeddingDataset, cfg: &ExperimentConfig, deltas: &DeltaCache) -> Result<(Schedule, Option<f64>)> {
    cfg.params.validate()?;
    cfg.fit.validate()?;
    let schedule = resolve_schedule(dataset, cfg)?;
    let delta = if cfg.strategy == QueryStrategy::ProbCover {
        Some(deltas.resolve(dataset, &cfg.params)?)
    } else {
        None
    };
    Ok((schedule, delta))
}

/// One (strategy, seed) cell as table rows; a failure becomes an error entry
/// and leaves no partial rows.
pub fn run_cell(
    dataset: &EmbeddingDataset,
    cfg: &ExperimentConfig,
    schedule: &Schedule,
    seed: u64,
    delta: Option<f64>,
) -> ResultsTable {
    match run_seed(dataset, cfg, schedule, seed, delta) {
        Ok(records) => ResultsTable {
            rows: to_rows(dataset, cfg.ips.name(), cfg.strategy.name(), &records),
            errors: Vec::new(),
        },
        Err(e) => ResultsTable {
            rows: Vec::new(),
            errors: vec![CellError {
                dataset: dataset.manifest.dataset_name.clone(),
                model: dataset.manifest.model_name.clone(),
                ips: cfg.ips.name().into(),
                strategy: cfg.strategy.name().into(),
                seed,
                message: e.to_string(),
            }],
        },
    }
}

/// Runs every seed of `cfg` (in parallel) and returns the sorted table.
pub fn run_experiment(dataset: &EmbeddingDataset, cfg: &ExperimentConfig) -> Result<ResultsTable> {
    let (schedule, delta) = prepare(dataset, cfg, &DeltaCache::default())?;
    let parts: Vec<ResultsTable> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_cell(dataset, cfg, &schedule, seed, delta))
        .collect();
    let mut table = ResultsTable::default();
    for p in parts {
        table.extend(p);
    }
    table.sort();
    Ok(table)
}

/// Fits a probe on each initial pool alone: one row per (strategy, k0, seed).
pub fn run_ips_sweep(
    dataset: &EmbeddingDataset,
    strategies: &[IpsStrategy],
    sizes: &[usize],
    seeds: &[u64],
    fit: &FitConfig,
    params: &StrategyParams,
) -> Result<ResultsTable> {
    fit.validate()?;
    params.validate()?;
    if let Some(&k0) = sizes.iter().find(|&&k| k == 0 || k > dataset.num_train()) {
        return Err(Error::Config(format!("initial pool size {k0} outside [1, {}]", dataset.num_train())));
    }
    let cells: Vec<(IpsStrategy, usize, u64)> = strategies
        .iter()
        .flat_map(|&s| sizes.iter().flat_map(move |&k| seeds.iter().map(move |&seed| (s, k, seed))))
        .collect();
    let parts: Vec<ResultsTable> = cells
        .par_iter()
        .map(|&(strategy, k0, seed)| {
            let cfg = ExperimentConfig {
                params: params.clone(),
                cycles: 0,
                k0: Some(k0),
                budget: Some(k0),
                seeds: vec![seed],
                fit: *fit,
                ..ExperimentConfig::new(strategy, QueryStrategy::Random)
            };
            let schedule = Schedule {
                k0,
                batch_size: 0,
                cycles: 0,
            };
            let mut t = run_cell(dataset, &cfg, &schedule, seed, None);
            for r in &mut t.rows {
                r.strategy = NO_QUERY.into();
            }
            for e in &mut t.errors {
                e.strategy = NO_QUERY.into();
            }
            t
        })
        .collect();
    let mut table = ResultsTable::default();
    for p in parts {
        table.extend(p);
    }
    table.sort();
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gaussian_blobs, BlobSpec};

    fn small() -> EmbeddingDataset {
        gaussian_blobs(&BlobSpec {
            num_train: 120,
            num_test: 40,
            dim: 4,
            num_classes: 3,
            center_scale: 3.0,
            budget: 42,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn batch_arithmetic() {
        assert_eq!(derive_batch_size(500, 20).unwrap(), (40, 23));
        assert_eq!(derive_batch_size(5000, 20).unwrap(), (240, 238));
        assert_eq!(derive_batch_size(21, 20).unwrap(), (1, 1));
        assert!(derive_batch_size(20, 20).is_err());
    }

    #[test]
    fn zero_cycles_yield_only_initial_rows() {
        let ds = small();
        let cfg = ExperimentConfig {
            cycles: 0,
            seeds: vec![0, 1],
            ..ExperimentConfig::new(IpsStrategy::Random, QueryStrategy::Random)
        };
        let t = run_experiment(&ds, &cfg).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows.iter().all(|r| r.cycle == 0 && r.labeled_size == 42));
    }

    #[test]
    fn labeled_sizes_form_the_schedule() {
        let ds = small();
        let cfg = ExperimentConfig {
            cycles: 5,
            seeds: vec![3],
            ..ExperimentConfig::new(IpsStrategy::TypiClust, QueryStrategy::Margin)
        };
        let t = run_experiment(&ds, &cfg).unwrap();
        let (k0, b) = derive_batch_size(42, 5).unwrap();
        let sizes: Vec<usize> = t.rows.iter().map(|r| r.labeled_size).collect();
        assert_eq!(sizes, (0..=5).map(|i| k0 + i * b).collect::<Vec<_>>());
        assert_eq!(*sizes.last().unwrap(), 42);
    }

    #[test]
    fn failing_cell_is_isolated() {
        let ds = small();
        let mut cfg = ExperimentConfig {
            cycles: 2,
            seeds: vec![0],
            ..ExperimentConfig::new(IpsStrategy::Random, QueryStrategy::Entropy)
        };
        let (schedule, _) = prepare(&ds, &cfg, &DeltaCache::default()).unwrap();
        cfg.fit.max_iterations = 0;
        let t = run_cell(&ds, &cfg, &schedule, 0, None);
        assert!(t.rows.is_empty());
        assert_eq!(t.errors.len(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let ds = small();
        let cfg = ExperimentConfig {
            cycles: 2,
            seeds: vec![0, 1],
            ..ExperimentConfig::new(IpsStrategy::Random, QueryStrategy::Badge)
        };
        let t = run_experiment(&ds, &cfg).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(RESULTS_HEADER));
        let back = ResultsTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.rows, t.rows);
    }

    #[test]
    fn full_pool_sweep_matches_full_data_probe() {
        let ds = small();
        let t = run_ips_sweep(&ds, &[IpsStrategy::Random, IpsStrategy::TypiClust], &[120], &[0], &FitConfig::default(), &StrategyParams::default()).unwrap();
        let all: Vec<usize> = (0..120).collect();
        let view = FeatureView::subset(&ds.train, &all);
        let labels = view.gather_labels(&ds.train_labels);
        let fit = probe::fit(view, &labels, 3, &FitConfig::default()).unwrap();
        let acc = probe::evaluate_accuracy(&fit.params, FeatureView::all(&ds.test), ds.test_labels.as_slice()).unwrap();
        assert_eq!(t.rows.len(), 2);
        for r in &t.rows {
            assert_eq!(r.strategy, NO_QUERY);
            assert!((r.accuracy - acc).abs() < 1e-12, "{} vs {acc}", r.accuracy);
        }
    }
}

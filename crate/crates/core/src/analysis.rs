//! Paired comparisons over result tables and the static report built from them.
//!
//! Every cross-strategy comparison pairs rows by seed. A comparison unit is a
//! (dataset, model, ips, cycle) cell; rows from IPS-only sweeps (strategy
//! `none`) never enter win rates, top-performer counts or difference curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::query::QueryStrategy;
use crate::runner::{ResultRow, ResultsTable, NO_QUERY};

/// Which rows enter an analysis. `None` admits everything; `strategies`
/// additionally fixes the matrix order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RowFilter {
    pub datasets: Option<Vec<String>>,
    pub models: Option<Vec<String>>,
    pub ips: Option<Vec<String>>,
    pub strategies: Option<Vec<String>>,
    pub cycles: Option<Vec<usize>>,
}

impl RowFilter {
    pub fn admits(&self, r: &ResultRow) -> bool {
        fn has(list: &Option<Vec<String>>, v: &str) -> bool {
            list.as_ref().is_none_or(|l| l.iter().any(|x| x == v))
        }
        let strategy_ok = match &self.strategies {
            Some(l) => l.contains(&r.strategy),
            None => r.strategy != NO_QUERY,
        };
        strategy_ok
            && has(&self.datasets, &r.dataset)
            && has(&self.models, &r.model)
            && has(&self.ips, &r.ips)
            && self.cycles.as_ref().is_none_or(|c| c.contains(&r.cycle))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedRule {
    /// One verdict per unit from the sign of the mean paired difference.
    #[default]
    MeanDifference,
    /// Every shared seed is its own comparison.
    PerSeed,
}

type UnitKey = (String, String, String, usize);
/// unit → strategy → seed → accuracy
type Units = BTreeMap<UnitKey, BTreeMap<String, BTreeMap<u64, f64>>>;

fn collect_units(results: &ResultsTable, filter: &RowFilter) -> Result<Units> {
    let mut units: Units = BTreeMap::new();
    for r in results.rows.iter().filter(|r| filter.admits(r)) {
        let slot = units
            .entry((r.dataset.clone(), r.model.clone(), r.ips.clone(), r.cycle))
            .or_default()
            .entry(r.strategy.clone())
            .or_default();
        if slot.insert(r.seed, r.accuracy).is_some() {
            return Err(Error::Analysis(format!("duplicate result key {:?}", r.key())));
        }
    }
    Ok(units)
}

/// Known strategies in their canonical order, unknown names after, by name.
fn canonical_order(names: impl IntoIterator<Item = String>) -> Vec<String> {
    let rank = |s: &str| QueryStrategy::ALL.iter().position(|q| q.name() == s).unwrap_or(usize::MAX);
    let mut v: Vec<String> = names.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    v.sort_by(|a, b| rank(a).cmp(&rank(b)).then_with(|| a.cmp(b)));
    v
}

fn strategy_order(units: &Units, filter: &RowFilter) -> Vec<String> {
    match &filter.strategies {
        Some(l) => l.clone(),
        None => canonical_order(units.values().flat_map(|m| m.keys().cloned())),
    }
}

fn shared_seeds<'a>(a: &'a BTreeMap<u64, f64>, b: &'a BTreeMap<u64, f64>) -> Vec<(f64, f64)> {
    a.iter().filter_map(|(s, &x)| b.get(s).map(|&y| (x, y))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedComparison {
    pub dataset: String,
    pub model: String,
    pub ips: String,
    pub cycle: usize,
    pub strategy: String,
    pub opponent: String,
}

/// Pairs that could not be compared because one side was absent or no seed
/// was shared.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub compared: u64,
    pub skipped: Vec<SkippedComparison>,
}

/// Integer win/tie/comparison counts; rates are derived with ties removed
/// from the denominator, so `win_rate(a, b) + win_rate(b, a) = 1` whenever
/// any untied comparison exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateMatrix {
    pub strategies: Vec<String>,
    pub win_counts: Vec<Vec<u64>>,
    pub tie_counts: Vec<Vec<u64>>,
    pub counts: Vec<Vec<u64>>,
    pub rule: SeedRule,
    pub coverage: Coverage,
}

impl WinRateMatrix {
    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.strategies.iter().position(|s| s == name)
    }

    /// Undefined on the diagonal and when every comparison tied.
    pub fn win_rate(&self, a: usize, b: usize) -> Option<f64> {
        let decided = self.counts[a][b] - self.tie_counts[a][b];
        (a != b && decided > 0).then(|| self.win_counts[a][b] as f64 / decided as f64)
    }

    pub fn win_rate_by_name(&self, a: &str, b: &str) -> Option<f64> {
        self.win_rate(self.index(a)?, self.index(b)?)
    }

    /// Off-diagonal mean win rate of `a` over opponents with a defined rate.
    pub fn mean_win_rate(&self, a: usize) -> Option<f64> {
        let rates: Vec<f64> = (0..self.len()).filter_map(|b| self.win_rate(a, b)).collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    /// The count identities every matrix must satisfy.
    pub fn check_identities(&self) -> Result<()> {
        let n = self.len();
        for a in 0..n {
            for b in 0..n {
                let bad = |what: &str| {
                    Err(Error::Analysis(format!(
                        "{what} violated for ({}, {})",
                        self.strategies[a], self.strategies[b]
                    )))
                };
                if self.counts[a][b] != self.counts[b][a] || self.tie_counts[a][b] != self.tie_counts[b][a] {
                    return bad("symmetry");
                }
                let total = if a == b {
                    self.win_counts[a][a] + self.tie_counts[a][a]
                } else {
                    self.win_counts[a][b] + self.win_counts[b][a] + self.tie_counts[a][b]
                };
                if total != self.counts[a][b] {
                    return bad("win + win + tie = count");
                }
                if a == b && self.win_counts[a][a] != 0 {
                    return bad("self comparison");
                }
            }
        }
        Ok(())
    }
}

pub fn pairwise_win_rates(results: &ResultsTable, filter: &RowFilter, rule: SeedRule) -> Result<WinRateMatrix> {
    let units = collect_units(results, filter)?;
    let strategies = strategy_order(&units, filter);
    let n = strategies.len();
    let zeros = || vec![vec![0u64; n]; n];
    let (mut wins, mut ties, mut counts) = (zeros(), zeros(), zeros());
    let mut coverage = Coverage::default();

    for ((dataset, model, ips, cycle), by_strategy) in &units {
        for a in 0..n {
            for b in a..n {
                let (Some(sa), Some(sb)) = (by_strategy.get(&strategies[a]), by_strategy.get(&strategies[b])) else {
                    if by_strategy.contains_key(&strategies[a]) || by_strategy.contains_key(&strategies[b]) {
                        coverage.skipped.push(SkippedComparison {
                            dataset: dataset.clone(),
                            model: model.clone(),
                            ips: ips.clone(),
                            cycle: *cycle,
                            strategy: strategies[a].clone(),
                            opponent: strategies[b].clone(),
                        });
                    }
                    continue;
                };
                let pairs = shared_seeds(sa, sb);
                if pairs.is_empty() {
                    coverage.skipped.push(SkippedComparison {
                        dataset: dataset.clone(),
                        model: model.clone(),
                        ips: ips.clone(),
                        cycle: *cycle,
                        strategy: strategies[a].clone(),
                        opponent: strategies[b].clone(),
                    });
                    continue;
                }
                let diffs: Vec<f64> = match rule {
                    SeedRule::MeanDifference => {
                        vec![pairs.iter().map(|(x, y)| x - y).sum::<f64>() / pairs.len() as f64]
                    }
                    SeedRule::PerSeed => pairs.iter().map(|(x, y)| x - y).collect(),
                };
                for d in diffs {
                    coverage.compared += 1;
                    counts[a][b] += 1;
                    if a != b {
                        counts[b][a] += 1;
                    }
                    if d > 0.0 {
                        wins[a][b] += 1;
                    } else if d < 0.0 {
                        wins[b][a] += 1;
                    } else {
                        ties[a][b] += 1;
                        if a != b {
                            ties[b][a] += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(WinRateMatrix {
        strategies,
        win_counts: wins,
        tie_counts: ties,
        counts,
        rule,
        coverage,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Cycle,
    Model,
    Dataset,
}

impl GroupBy {
    pub const ALL: [GroupBy; 3] = [GroupBy::Cycle, GroupBy::Model, GroupBy::Dataset];

    pub fn name(self) -> &'static str {
        match self {
            GroupBy::Cycle => "cycle",
            GroupBy::Model => "model",
            GroupBy::Dataset => "dataset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFrequency {
    pub group: String,
    /// Units won per strategy, aligned with the table's strategy list.
    pub units_won: Vec<u64>,
    pub decided_units: u64,
    pub tied_units: u64,
    /// Units where no seed was shared by all strategies present.
    pub skipped_units: u64,
}

impl GroupFrequency {
    pub fn share(&self, strategy: usize) -> Option<f64> {
        (self.decided_units > 0).then(|| self.units_won[strategy] as f64 / self.decided_units as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPerformerTable {
    pub group_by: GroupBy,
    pub strategies: Vec<String>,
    pub groups: Vec<GroupFrequency>,
}

impl TopPerformerTable {
    pub fn share(&self, group: &str, strategy: &str) -> Option<f64> {
        let s = self.strategies.iter().position(|x| x == strategy)?;
        self.groups.iter().find(|g| g.group == group)?.share(s)
    }
}

/// Per unit, the strategy with the highest seed-mean accuracy over the seeds
/// every present strategy shares. Units with a tied top are counted but not
/// awarded.
pub fn top_performer_frequency(results: &ResultsTable, filter: &RowFilter, group_by: GroupBy) -> Result<TopPerformerTable> {
    let units = collect_units(results, filter)?;
    let strategies = strategy_order(&units, filter);
    let mut groups: BTreeMap<(usize, String), GroupFrequency> = BTreeMap::new();

    for ((dataset, model, _, cycle), by_strategy) in &units {
        let key = match group_by {
            GroupBy::Cycle => (*cycle, cycle.to_string()),
            GroupBy::Model => (0, model.clone()),
            GroupBy::Dataset => (0, dataset.clone()),
        };
        let g = groups.entry(key.clone()).or_insert_with(|| GroupFrequency {
            group: key.1.clone(),
            units_won: vec![0; strategies.len()],
            decided_units: 0,
            tied_units: 0,
            skipped_units: 0,
        });
        let present: Vec<(usize, &BTreeMap<u64, f64>)> = strategies
            .iter()
            .enumerate()
            .filter_map(|(i, s)| by_strategy.get(s).map(|m| (i, m)))
            .collect();
        let Some((_, first)) = present.first() else { continue };
        let seeds: Vec<u64> = first
            .keys()
            .copied()
            .filter(|s| present.iter().all(|(_, m)| m.contains_key(s)))
            .collect();
        if seeds.is_empty() {
            g.skipped_units += 1;
            continue;
        }
        let means: Vec<(usize, f64)> = present
            .iter()
            .map(|(i, m)| (*i, seeds.iter().map(|s| m[s]).sum::<f64>() / seeds.len() as f64))
            .collect();
        let best = means.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
        let leaders: Vec<usize> = means.iter().filter(|&&(_, v)| v == best).map(|&(i, _)| i).collect();
        if leaders.len() == 1 {
            g.units_won[leaders[0]] += 1;
            g.decided_units += 1;
        } else {
            g.tied_units += 1;
        }
    }
    Ok(TopPerformerTable {
        group_by,
        strategies,
        groups: groups.into_values().collect(),
    })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed-paired difference `a − b` summarized over seeds (sample sd).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferencePoint {
    pub dataset: String,
    pub model: String,
    pub strategy: String,
    pub cycle: usize,
    pub mean: f64,
    pub sd: f64,
    pub seeds: usize,
}

/// Paired per-seed differences between a table run with one initial-pool
/// method and a table run with another. Both must cover the same
/// (dataset, model, strategy, seed, cycle) keys.
pub fn ips_difference_curves(treatment: &ResultsTable, baseline: &ResultsTable) -> Result<Vec<DifferencePoint>> {
    type Key = (String, String, String, usize, u64);
    let index = |t: &ResultsTable| -> Result<BTreeMap<Key, f64>> {
        let mut m = BTreeMap::new();
        for r in t.rows.iter().filter(|r| r.strategy != NO_QUERY) {
            let k = (r.dataset.clone(), r.model.clone(), r.strategy.clone(), r.cycle, r.seed);
            if m.insert(k, r.accuracy).is_some() {
                return Err(Error::Analysis(format!(
                    "several rows for {:?}; split the table by initial-pool method first",
                    r.key()
                )));
            }
        }
        Ok(m)
    };
    let a = index(treatment)?;
    let b = index(baseline)?;
    let describe = |k: &Key| format!("{}/{}/{} cycle {} seed {}", k.0, k.1, k.2, k.3, k.4);
    let only_a: Vec<String> = a.keys().filter(|k| !b.contains_key(*k)).map(describe).collect();
    let only_b: Vec<String> = b.keys().filter(|k| !a.contains_key(*k)).map(describe).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(Error::Analysis(format!(
            "unpaired rows; missing from baseline: [{}]; missing from treatment: [{}]",
            only_a.join(", "),
            only_b.join(", ")
        )));
    }

    let mut grouped: BTreeMap<(String, String, String, usize), Vec<f64>> = BTreeMap::new();
    for (k, &x) in &a {
        grouped
            .entry((k.0.clone(), k.1.clone(), k.2.clone(), k.3))
            .or_default()
            .push(x - b[k]);
    }
    Ok(grouped
        .into_iter()
        .map(|((dataset, model, strategy, cycle), diffs)| {
            let (mean, sd) = mean_sd(&diffs);
            DifferencePoint {
                dataset,
                model,
                strategy,
                cycle,
                mean,
                sd,
                seeds: diffs.len(),
            }
        })
        .collect())
}

/// Seed mean and sample sd of accuracy at one point of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub dataset: String,
    pub model: String,
    pub ips: String,
    pub strategy: String,
    pub cycle: usize,
    pub labeled_size: usize,
    pub mean: f64,
    pub sd: f64,
    pub seeds: usize,
}

/// Learning curves for AL rows and initial-pool curves (x = pool size) for
/// sweep rows.
pub fn accuracy_curves(results: &ResultsTable) -> Vec<CurvePoint> {
    // (dataset, model, ips, strategy, cycle, labeled_size)
    type CurveKey = (String, String, String, String, usize, usize);
    let mut grouped: BTreeMap<CurveKey, Vec<f64>> = BTreeMap::new();
    for r in &results.rows {
        let k = (r.dataset.clone(), r.model.clone(), r.ips.clone(), r.strategy.clone(), r.cycle, r.labeled_size);
        grouped.entry(k).or_default().push(r.accuracy);
    }
    grouped
        .into_iter()
        .map(|((dataset, model, ips, strategy, cycle, labeled_size), v)| {
            let (mean, sd) = mean_sd(&v);
            CurvePoint {
                dataset,
                model,
                ips,
                strategy,
                cycle,
                labeled_size,
                mean,
                sd,
                seeds: v.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    pub name: String,
    pub matrix: WinRateMatrix,
}

/// Everything the report renders.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Analyses {
    /// Input name → sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub accuracy: Vec<CurvePoint>,
    pub win_rates: Vec<NamedMatrix>,
    pub top_performers: Vec<TopPerformerTable>,
    /// Present when the table holds both `typiclust` and `random` initial pools.
    pub ips_difference: Vec<DifferencePoint>,
}

pub const TREATMENT_IPS: &str = "typiclust";
pub const BASELINE_IPS: &str = "random";

/// The standard analysis set for one merged results table.
pub fn analyze(results: &ResultsTable, rule: SeedRule) -> Result<Analyses> {
    results.check_unique()?;
    let mut out = Analyses {
        accuracy: accuracy_curves(results),
        ..Default::default()
    };
    let al_rows = results.rows.iter().any(|r| r.strategy != NO_QUERY);
    if !al_rows {
        return Ok(out);
    }
    out.win_rates.push(NamedMatrix {
        name: "all".into(),
        matrix: pairwise_win_rates(results, &RowFilter::default(), rule)?,
    });
    let ips_values: BTreeSet<&str> = results.rows.iter().filter(|r| r.strategy != NO_QUERY).map(|r| r.ips.as_str()).collect();
    if ips_values.len() > 1 {
        for ips in &ips_values {
            let filter = RowFilter {
                ips: Some(vec![ips.to_string()]),
                ..Default::default()
            };
            out.win_rates.push(NamedMatrix {
                name: format!("ips-{ips}"),
                matrix: pairwise_win_rates(results, &filter, rule)?,
            });
        }
    }
    for g in GroupBy::ALL {
        out.top_performers.push(top_performer_frequency(results, &RowFilter::default(), g)?);
    }
    if ips_values.contains(TREATMENT_IPS) && ips_values.contains(BASELINE_IPS) {
        let split = |ips: &str| ResultsTable {
            rows: results.rows.iter().filter(|r| r.ips == ips).cloned().collect(),
            errors: Vec::new(),
        };
        out.ips_difference = ips_difference_curves(&split(TREATMENT_IPS), &split(BASELINE_IPS))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub kind: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub artifacts: Vec<Artifact>,
    pub inputs: BTreeMap<String, String>,
}

pub const INDEX_FILE: &str = "index.json";

/// sha256 of a file's bytes, for provenance records.
pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn slug(parts: &[&str]) -> String {
    parts
        .iter()
        .map(|p| {
            p.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("_")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Writer<'a> {
    dir: &'a Path,
    index: ReportIndex,
}

impl Writer<'_> {
    fn put(&mut self, file: String, kind: &str, contents: &[u8]) -> Result<()> {
        let path: PathBuf = self.dir.join(&file);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.index.artifacts.push(Artifact { file, kind: kind.into() });
        Ok(())
    }

    fn put_csv(&mut self, file: String, kind: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Analysis(format!("writing {file}: {e}"));
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(&r).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Analysis(format!("writing {file}: {e}")))?;
        self.put(file.clone(), kind, &bytes)
    }
}

/// Writes CSV tables, SVG plots and `index.json` into `out_dir`. Output bytes
/// depend only on `analyses`.
pub fn render_report(analyses: &Analyses, out_dir: &Path) -> Result<ReportIndex> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut w = Writer {
        dir: out_dir,
        index: ReportIndex {
            artifacts: Vec::new(),
            inputs: analyses.inputs.clone(),
        },
    };

    if !analyses.accuracy.is_empty() {
        let rows = analyses
            .accuracy
            .iter()
            .map(|p| {
                vec![
                    p.dataset.clone(),
                    p.model.clone(),
                    p.ips.clone(),
                    p.strategy.clone(),
                    p.cycle.to_string(),
                    p.labeled_size.to_string(),
                    p.mean.to_string(),
                    p.sd.to_string(),
                    p.seeds.to_string(),
                ]
            })
            .collect();
        w.put_csv(
            "accuracy_curves.csv".into(),
            "table",
            &["dataset", "model", "ips", "strategy", "cycle", "labeled_size", "mean", "sd", "seeds"],
            rows,
        )?;
        let mut panels: BTreeMap<(&str, &str, &str), Series<'_>> = BTreeMap::new();
        let mut sweeps: BTreeMap<(&str, &str), Series<'_>> = BTreeMap::new();
        for p in &analyses.accuracy {
            if p.strategy == NO_QUERY {
                sweeps
                    .entry((&p.dataset, &p.model))
                    .or_default()
                    .entry(&p.ips)
                    .or_default()
                    .push((p.labeled_size as f64, p.mean));
            } else {
                panels
                    .entry((&p.dataset, &p.model, &p.ips))
                    .or_default()
                    .entry(&p.strategy)
                    .or_default()
                    .push((p.cycle as f64, p.mean));
            }
        }
        for ((d, m, i), series) in panels {
            let svg = line_chart(&format!("{d} / {m} / {i} initial pool"), "cycle", "accuracy", &series);
            w.put(format!("accuracy_{}.svg", slug(&[d, m, i])), "line_plot", svg.as_bytes())?;
        }
        for ((d, m), series) in sweeps {
            let svg = line_chart(&format!("{d} / {m} initial pools"), "initial pool size", "accuracy", &series);
            w.put(format!("ips_sweep_{}.svg", slug(&[d, m])), "line_plot", svg.as_bytes())?;
        }
    }

    for nm in &analyses.win_rates {
        let m = &nm.matrix;
        let mut rows = Vec::new();
        for a in 0..m.len() {
            for b in 0..m.len() {
                if a == b {
                    continue;
                }
                rows.push(vec![
                    m.strategies[a].clone(),
                    m.strategies[b].clone(),
                    m.win_counts[a][b].to_string(),
                    m.tie_counts[a][b].to_string(),
                    m.counts[a][b].to_string(),
                    fmt_opt(m.win_rate(a, b)),
                ]);
            }
        }
        w.put_csv(
            format!("win_rates_{}.csv", slug(&[&nm.name])),
            "table",
            &["strategy", "opponent", "wins", "ties", "comparisons", "win_rate"],
            rows,
        )?;
        let values: Vec<Vec<Option<f64>>> = (0..m.len()).map(|a| (0..m.len()).map(|b| m.win_rate(a, b)).collect()).collect();
        let svg = heatmap(&format!("pairwise win rates ({})", nm.name), &m.strategies, &values);
        w.put(format!("win_rates_{}.svg", slug(&[&nm.name])), "heatmap", svg.as_bytes())?;
    }

    for t in &analyses.top_performers {
        let mut rows = Vec::new();
        for g in &t.groups {
            for (s, name) in t.strategies.iter().enumerate() {
                rows.push(vec![
                    g.group.clone(),
                    name.clone(),
                    g.units_won[s].to_string(),
                    g.decided_units.to_string(),
                    g.tied_units.to_string(),
                    g.skipped_units.to_string(),
                    fmt_opt(g.share(s)),
                ]);
            }
        }
        w.put_csv(
            format!("top_performers_by_{}.csv", t.group_by.name()),
            "table",
            &["group", "strategy", "units_won", "decided_units", "tied_units", "skipped_units", "share"],
            rows,
        )?;
        let values: Vec<Vec<Option<f64>>> = (0..t.strategies.len())
            .map(|s| t.groups.iter().map(|g| g.share(s)).collect())
            .collect();
        let cols: Vec<String> = t.groups.iter().map(|g| g.group.clone()).collect();
        let svg = grid_heatmap(&format!("top performer share by {}", t.group_by.name()), &t.strategies, &cols, &values);
        w.put(format!("top_performers_by_{}.svg", t.group_by.name()), "heatmap", svg.as_bytes())?;
    }

    if !analyses.ips_difference.is_empty() {
        let rows = analyses
            .ips_difference
            .iter()
            .map(|p| {
                vec![
                    p.dataset.clone(),
                    p.model.clone(),
                    p.strategy.clone(),
                    p.cycle.to_string(),
                    p.mean.to_string(),
                    p.sd.to_string(),
                    p.seeds.to_string(),
                ]
            })
            .collect();
        w.put_csv(
            "ips_difference.csv".into(),
            "table",
            &["dataset", "model", "strategy", "cycle", "mean", "sd", "seeds"],
            rows,
        )?;
        let mut panels: BTreeMap<(&str, &str), Series<'_>> = BTreeMap::new();
        for p in &analyses.ips_difference {
            panels
                .entry((&p.dataset, &p.model))
                .or_default()
                .entry(&p.strategy)
                .or_default()
                .push((p.cycle as f64, p.mean));
        }
        for ((d, m), series) in panels {
            let title = format!("{d} / {m}: {TREATMENT_IPS} minus {BASELINE_IPS} initial pool");
            let svg = line_chart(&title, "cycle", "accuracy difference", &series);
            w.put(format!("ips_difference_{}.svg", slug(&[d, m])), "line_plot", svg.as_bytes())?;
        }
    }

    let index = w.index;
    let path = out_dir.join(INDEX_FILE);
    let mut json = serde_json::to_string_pretty(&index)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn num(v: f64) -> String {
    format!("{v:.2}")
}

/// Multi-series line chart with linear axes and a legend on the right.
/// Named polylines of (x, y) points.
pub type Series<'a> = BTreeMap<&'a str, Vec<(f64, f64)>>;

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &Series) -> String {
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 170.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let pts = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = W - L - R;
    let ph = H - T - B;
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| T + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, L + pw / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, num(sx(xv)), H - B + 18.0, num(xv));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, L - 6.0, num(sy(yv) + 4.0), num(yv));
        let _ = writeln!(s, r##"<line x1="{L}" x2="{}" y1="{y}" y2="{y}" stroke="#dddddd"/>"##, L + pw, y = num(sy(yv)));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, L + pw / 2.0, H - 10.0, xml_escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        xml_escape(y_label),
        y = T + ph / 2.0
    );
    for (k, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut sorted = points.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = sorted.iter().map(|&(x, y)| format!("{},{}", num(sx(x)), num(sy(y)))).collect();
        let _ = writeln!(s, r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        let ly = T + 16.0 * k as f64 + 8.0;
        let _ = writeln!(s, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, W - R + 12.0, W - R + 32.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, W - R + 38.0, ly + 4.0, xml_escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Square matrix heatmap; absent cells are drawn grey.
pub fn heatmap(title: &str, labels: &[String], values: &[Vec<Option<f64>>]) -> String {
    grid_heatmap(title, labels, labels, values)
}

/// Rows × columns heatmap over values in [0, 1].
pub fn grid_heatmap(title: &str, rows: &[String], cols: &[String], values: &[Vec<Option<f64>>]) -> String {
    const CELL: f64 = 48.0;
    const L: f64 = 110.0;
    const T: f64 = 90.0;
    let w = L + CELL * cols.len() as f64 + 20.0;
    let h = T + CELL * rows.len() as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14">{}</text>"#, 10, xml_escape(title));
    for (j, c) in cols.iter().enumerate() {
        let x = L + CELL * (j as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" transform="rotate(-45 {x} {})">{}</text>"#, T - 6.0, T - 6.0, xml_escape(c));
    }
    for (i, r) in rows.iter().enumerate() {
        let y = T + CELL * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, L - 6.0, y + CELL / 2.0 + 4.0, xml_escape(r));
        for j in 0..cols.len() {
            let x = L + CELL * j as f64;
            let v = values.get(i).and_then(|row| row.get(j)).copied().flatten();
            let fill = match v {
                Some(v) => {
                    let t = v.clamp(0.0, 1.0);
                    let ch = |lo: f64, hi: f64| (lo + (hi - lo) * t).round() as u8;
                    format!("#{:02x}{:02x}{:02x}", ch(247.0, 8.0), ch(251.0, 81.0), ch(255.0, 156.0))
                }
                None => "#cccccc".to_string(),
            };
            let _ = writeln!(s, r#"<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="white"/>"#);
            if let Some(v) = v {
                let ink = if v > 0.5 { "white" } else { "black" };
                let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{}</text>"#, x + CELL / 2.0, y + CELL / 2.0 + 4.0, num(v));
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

//! `alforge`: validate datasets, run experiment grids and sweeps, build reports.
//!
//! Exit status: 0 on success, 1 when some experiment cells failed (or on a
//! runtime failure), 2 for invalid inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alforge::analysis::{self, GroupBy, RowFilter, SeedRule};
use alforge::grid::{self, GridConfig, Outcome, RunSummary, SweepConfig, RUN_MANIFEST_FILE};
use alforge::runner::ResultsTable;
use alforge::store;
use alforge::synth::{self, BlobSpec};
use alforge::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "alforge", version, about = "Active learning benchmark over frozen embeddings")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace); RUST_LOG overrides.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset directory and print its manifest summary.
    Validate { dir: PathBuf },
    /// Run an experiment grid.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an initial-pool-only sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print win rates and top-performer shares for result tables.
    Analyze {
        #[arg(long, required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Rule::Mean)]
        rule: Rule,
    },
    /// Write CSV tables, SVG plots and index.json for result tables.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Rule::Mean)]
        rule: Rule,
    },
    /// Write a synthetic Gaussian-blob dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "blobs")]
        name: String,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 200)]
        budget: usize,
        #[arg(long, default_value_t = 1.0)]
        center_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    /// Sign of the mean paired difference per unit.
    Mean,
    /// One comparison per shared seed.
    PerSeed,
}

impl From<Rule> for SeedRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Mean => SeedRule::MeanDifference,
            Rule::PerSeed => SeedRule::PerSeed,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() {
        2
    } else {
        1
    }
}

fn validate(dir: &Path) -> Result<ExitCode, Error> {
    let ds = store::load_dataset(dir)?;
    let m = &ds.manifest;
    println!("ok {}", dir.display());
    println!("  dataset     {}", m.dataset_name);
    println!("  model       {} ({})", m.model_name, serde_json::to_value(m.pooling)?.as_str().unwrap_or("?"));
    println!("  train/test  {} / {}", m.num_train, m.num_test);
    println!("  classes     {}", m.num_classes);
    println!("  dim         {}", m.embedding_dim);
    println!("  budget      {}", m.budget);
    println!("  checksum    {}", m.source_checksum);
    Ok(ExitCode::SUCCESS)
}

fn summarize(s: RunSummary) -> ExitCode {
    println!("{} rows written to {}", s.rows, s.output_dir.display());
    match s.outcome {
        Outcome::Complete => ExitCode::SUCCESS,
        Outcome::Partial => {
            eprintln!("{} cell(s) failed; see {}", s.errors.len(), s.output_dir.join(grid::ERRORS_FILE).display());
            ExitCode::from(1)
        }
    }
}

/// Merged table plus provenance digests of every input.
fn load_results(paths: &[PathBuf]) -> Result<(ResultsTable, BTreeMap<String, String>), Error> {
    let mut table = ResultsTable::default();
    let mut inputs = BTreeMap::new();
    for p in paths {
        let digest = analysis::digest_file(p)?;
        let bytes = fs::read(p).map_err(|_| Error::MissingFile(p.clone()))?;
        table.extend(ResultsTable::read_csv(bytes.as_slice())?);
        inputs.insert(p.display().to_string(), digest);
        let manifest = p.with_file_name(RUN_MANIFEST_FILE);
        if let Ok(text) = fs::read_to_string(&manifest) {
            if let Some(hash) = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| v.get("config_hash").and_then(|h| h.as_str().map(str::to_string)))
            {
                inputs.insert(format!("{}#config_hash", p.display()), hash);
            }
        }
    }
    table.sort();
    table.check_unique()?;
    Ok((table, inputs))
}

fn analyze(paths: &[PathBuf], rule: Rule) -> Result<ExitCode, Error> {
    let (table, _) = load_results(paths)?;
    let m = analysis::pairwise_win_rates(&table, &RowFilter::default(), rule.into())?;
    if m.is_empty() {
        println!("no query-strategy rows to compare");
        return Ok(ExitCode::SUCCESS);
    }
    let width = m.strategies.iter().map(String::len).max().unwrap_or(8).max(8);
    print!("{:width$}", "win rate");
    for s in &m.strategies {
        print!(" {s:>width$}");
    }
    println!("  {:>width$}", "mean");
    for a in 0..m.len() {
        print!("{:width$}", m.strategies[a]);
        for b in 0..m.len() {
            match m.win_rate(a, b) {
                Some(v) => print!(" {v:>width$.3}"),
                None => print!(" {:>width$}", "-"),
            }
        }
        match m.mean_win_rate(a) {
            Some(v) => println!("  {v:>width$.3}"),
            None => println!("  {:>width$}", "-"),
        }
    }
    println!("{} comparisons, {} skipped for missing pairs", m.coverage.compared, m.coverage.skipped.len());

    let overall = analysis::top_performer_frequency(&table, &RowFilter::default(), GroupBy::Dataset)?;
    let mut won = vec![0u64; overall.strategies.len()];
    let mut decided = 0;
    for g in &overall.groups {
        decided += g.decided_units;
        for (w, u) in won.iter_mut().zip(&g.units_won) {
            *w += u;
        }
    }
    if decided > 0 {
        println!("\ntop performer share over {decided} untied units");
        for (s, w) in overall.strategies.iter().zip(won) {
            println!("  {s:width$} {:.3}", w as f64 / decided as f64);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn report(paths: &[PathBuf], out: &Path, rule: Rule) -> Result<ExitCode, Error> {
    let (table, inputs) = load_results(paths)?;
    let mut analyses = analysis::analyze(&table, rule.into())?;
    analyses.inputs = inputs;
    let index = analysis::render_report(&analyses, out)?;
    println!("{} artifacts written to {}", index.artifacts.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Validate { dir } => validate(&dir),
        Command::Run { config } => Ok(summarize(grid::run_grid(&GridConfig::load(&config)?)?)),
        Command::Sweep { config } => Ok(summarize(grid::run_sweep(&SweepConfig::load(&config)?)?)),
        Command::Analyze { results, rule } => analyze(&results, rule),
        Command::Report { results, out, rule } => report(&results, &out, rule),
        Command::Synth {
            out,
            name,
            classes,
            dim,
            train,
            test,
            budget,
            center_scale,
            seed,
        } => {
            let ds = synth::gaussian_blobs(&BlobSpec {
                dataset_name: name,
                num_classes: classes,
                dim,
                num_train: train,
                num_test: test,
                budget,
                center_scale,
                seed,
                ..Default::default()
            })?;
            let manifest = store::save(&ds, &out)?;
            println!("wrote {} ({})", out.display(), manifest.source_checksum);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).parse_default_env().init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

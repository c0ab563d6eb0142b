//! Batch experiment driver: builds instance batches from CATS files or
//! the synthetic generator, fits the value prior on held-out bidders,
//! runs each configured pricer on each instance, and reports clearing
//! rates and round counts with standard errors.
//!
//! Outputs under the configured directory:
//!
//! * `results.csv` with columns `instance,distribution,pricer,cleared,
//!   rounds,efficiency`, flushed row by row so partial results survive a
//!   failure, and byte-identical across reruns of the same config + seed.
//! * `timing.csv` with per-run wall times (`instance,pricer,millis`),
//!   kept apart from `results.csv` because timings are not deterministic.
//! * `summary.csv` and `summary.txt`, the per-pricer aggregate table.
//! * `tuning.csv` (step-size sweeps) and `sweep.csv` (sample-size sweeps)
//!   for the corresponding commands.
//!
//! Round statistics are computed over the instances cleared by every
//! pricer in the comparison; clearing percentages count all attempted
//! instances. Config files are flat `key = value` text with `#` comments;
//! the command line overrides file values, which override defaults.
//!
//! Instances run on a bounded worker pool (`workers` config key) and
//! results are flushed in instance-id order, so outputs are identical
//! for any worker count.

use crate::cats::{generate_synthetic, parse_cats, serialize_cats, CatsError, SyntheticParams};
use crate::engine::{render_trace, run_auction, BayesPricer, EngineError, Pricer};
use crate::instance::{
    group_bidders, instance_from_pool, normalize_values, sample_instance, scale_values,
    split_train_test,
    AuctionInstance, BidderMode, BidderPool, DistributionTag, InstanceError,
};
use crate::mcem::{splitmix64, McemConfig, McemError};
use crate::prior::{HyperSearch, PriorError, PriorModel};
use crate::subgradient::{
    batch_gamma_from_cells, best_cell_for_instance, stepsize_grid, sweep_stepsizes,
    SubgradientPricer, TuningCell,
};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Cats {
        path: PathBuf,
        #[source]
        source: CatsError,
    },
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Mcem(#[from] McemError),
    #[error("auction failed on instance {instance} under {pricer}: {source}")]
    Auction {
        instance: usize,
        pricer: &'static str,
        #[source]
        source: EngineError,
    },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("standard error needs at least 2 samples, got {found}")]
    TooFewSamples { found: usize },
    #[error("no pricers configured")]
    NoPricers,
    #[error("source is cats but no files were given")]
    NoCatsFiles,
    #[error("results csv line {line} is malformed: {content:?}")]
    MalformedCsv { line: usize, content: String },
}

/// Where instances come from.
#[derive(Clone, Debug, PartialEq)]
pub enum InstanceSource {
    /// Per-instance files from the built-in clearable generator.
    Synthetic,
    /// User-supplied CATS files, pooled and split into train/test bidders.
    Cats(Vec<PathBuf>),
}

/// Price-update strategies the harness can field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PricerKind {
    /// Belief-driven Monte Carlo EM pricer.
    Bayes,
    /// Subgradient steps under the batch-tuned step size.
    SgBatch,
    /// Subgradient steps under each instance's own best step size.
    SgPerInstance,
}

impl PricerKind {
    pub fn label(&self) -> &'static str {
        match self {
            PricerKind::Bayes => "bayes",
            PricerKind::SgBatch => "sg-d",
            PricerKind::SgPerInstance => "sg-i",
        }
    }

    pub fn parse(text: &str) -> Option<PricerKind> {
        match text.trim() {
            "bayes" => Some(PricerKind::Bayes),
            "sg-d" => Some(PricerKind::SgBatch),
            "sg-i" => Some(PricerKind::SgPerInstance),
            _ => None,
        }
    }
}

/// Full experiment description; every field has a default and a config
/// key of the same name as the CLI flag.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub source: InstanceSource,
    pub mode: BidderMode,
    pub distribution: DistributionTag,
    pub instance_count: usize,
    pub round_cap: usize,
    pub pricers: Vec<PricerKind>,
    pub mcem: McemConfig,
    /// Probit sharpness for belief updates.
    pub beta: f64,
    /// Bidders drawn per instance from a CATS test pool.
    pub bidders_per_instance: usize,
    /// Items per synthetic file.
    pub synthetic_items: usize,
    /// Bids per synthetic file.
    pub synthetic_bids: usize,
    pub synthetic_params: SyntheticParams,
    /// Extra synthetic files pooled to fit the prior.
    pub train_files: usize,
    /// Train share of a CATS bidder pool.
    pub train_fraction: f64,
    pub gamma_count: usize,
    pub gamma_max: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub write_traces: bool,
    /// Worker threads for instance-level parallelism. Outputs do not
    /// depend on this.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: InstanceSource::Synthetic,
            mode: BidderMode::MultiMinded,
            distribution: DistributionTag::Synthetic,
            instance_count: 300,
            round_cap: 100,
            pricers: vec![PricerKind::Bayes, PricerKind::SgBatch, PricerKind::SgPerInstance],
            mcem: McemConfig::default(),
            beta: 1.0,
            bidders_per_instance: 10,
            synthetic_items: 8,
            synthetic_bids: 18,
            synthetic_params: SyntheticParams::default(),
            train_files: 20,
            train_fraction: 0.5,
            gamma_count: 100,
            gamma_max: 10.0,
            seed: 0,
            output_dir: PathBuf::from("out"),
            write_traces: false,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

/// One per-instance, per-pricer result line.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub instance: usize,
    pub distribution: String,
    pub pricer: String,
    pub cleared: bool,
    pub rounds: usize,
    pub efficiency: f64,
}

/// Wall time of one run; kept out of the deterministic results file.
#[derive(Clone, Debug)]
pub struct TimingRow {
    pub instance: usize,
    pub pricer: String,
    pub millis: f64,
}

/// Sample standard deviation (n−1 denominator) over the square root of n.
pub fn standard_error(samples: &[f64]) -> Result<f64, HarnessError> {
    let n = samples.len();
    if n < 2 {
        return Err(HarnessError::TooFewSamples { found: n });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let variance =
        samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    Ok((variance / n as f64).sqrt())
}

/// Linear-interpolation percentile of an ascending slice, q in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Aggregate line for one pricer. Round statistics are present only when
/// the commonly-cleared set is nonempty (and the standard error needs at
/// least two instances in it).
#[derive(Clone, Debug)]
pub struct PricerSummary {
    pub pricer: String,
    pub clearing_percent: f64,
    pub common_cleared: usize,
    pub mean_rounds: Option<f64>,
    pub rounds_se: Option<f64>,
    /// First, second, third quartile of rounds on the common set.
    pub quartiles: Option<[f64; 3]>,
    /// 10th and 90th percentile of rounds on the common set.
    pub deciles: Option<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct SummaryTable {
    pub rows: Vec<PricerSummary>,
}

/// Builds the per-pricer summary from result rows: clearing percentages
/// over all attempted instances, round statistics over the instances
/// cleared by every pricer present.
pub fn summarize(rows: &[ResultRow]) -> SummaryTable {
    let mut pricers: Vec<String> = Vec::new();
    for row in rows {
        if !pricers.contains(&row.pricer) {
            pricers.push(row.pricer.clone());
        }
    }
    let mut instances: Vec<usize> = Vec::new();
    for row in rows {
        if !instances.contains(&row.instance) {
            instances.push(row.instance);
        }
    }
    let common: Vec<usize> = instances
        .iter()
        .copied()
        .filter(|&i| {
            pricers.iter().all(|p| {
                rows.iter()
                    .any(|r| r.instance == i && &r.pricer == p && r.cleared)
            })
        })
        .collect();

    let mut out = Vec::new();
    for pricer in &pricers {
        let mine: Vec<&ResultRow> = rows.iter().filter(|r| &r.pricer == pricer).collect();
        let attempted = mine.len();
        let cleared = mine.iter().filter(|r| r.cleared).count();
        let clearing_percent = 100.0 * cleared as f64 / attempted as f64;
        let mut common_rounds: Vec<f64> = common
            .iter()
            .map(|&i| {
                mine.iter()
                    .find(|r| r.instance == i)
                    .expect("common instance has a row for every pricer")
                    .rounds as f64
            })
            .collect();
        common_rounds.sort_by(|a, b| a.partial_cmp(b).expect("round counts are finite"));
        let mean_rounds = if common_rounds.is_empty() {
            None
        } else {
            Some(common_rounds.iter().sum::<f64>() / common_rounds.len() as f64)
        };
        let rounds_se = standard_error(&common_rounds).ok();
        let quartiles = if common_rounds.is_empty() {
            None
        } else {
            Some([
                percentile(&common_rounds, 0.25),
                percentile(&common_rounds, 0.50),
                percentile(&common_rounds, 0.75),
            ])
        };
        let deciles = if common_rounds.is_empty() {
            None
        } else {
            Some([percentile(&common_rounds, 0.10), percentile(&common_rounds, 0.90)])
        };
        out.push(PricerSummary {
            pricer: pricer.clone(),
            clearing_percent,
            common_cleared: common.len(),
            mean_rounds,
            rounds_se,
            quartiles,
            deciles,
        });
    }
    SummaryTable { rows: out }
}

pub const RESULTS_HEADER: &str = "instance,distribution,pricer,cleared,rounds,efficiency";

fn result_line(row: &ResultRow) -> String {
    format!(
        "{},{},{},{},{},{}",
        row.instance, row.distribution, row.pricer, row.cleared, row.rounds, row.efficiency
    )
}

/// Renders rows as the documented results CSV.
pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&result_line(row));
        out.push('\n');
    }
    out
}

/// Parses a results CSV produced by `results_csv` (or the incremental
/// writer).
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, HarnessError> {
    let mut rows = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if index == 0 {
            if line != RESULTS_HEADER {
                return Err(HarnessError::MalformedCsv {
                    line: 1,
                    content: line.to_string(),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let bad = || HarnessError::MalformedCsv {
            line: index + 1,
            content: line.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad());
        }
        rows.push(ResultRow {
            instance: fields[0].parse().map_err(|_| bad())?,
            distribution: fields[1].to_string(),
            pricer: fields[2].to_string(),
            cleared: fields[3].parse().map_err(|_| bad())?,
            rounds: fields[4].parse().map_err(|_| bad())?,
            efficiency: fields[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

fn optional(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Summary as CSV, one row per pricer; absent round statistics are empty
/// fields.
pub fn summary_csv(table: &SummaryTable) -> String {
    let mut out = String::from(
        "pricer,clearing_percent,common_cleared,mean_rounds,rounds_se,q1,median,q3,p10,p90\n",
    );
    for row in &table.rows {
        let q = row.quartiles;
        let d = row.deciles;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            row.pricer,
            row.clearing_percent,
            row.common_cleared,
            optional(row.mean_rounds),
            optional(row.rounds_se),
            optional(q.map(|q| q[0])),
            optional(q.map(|q| q[1])),
            optional(q.map(|q| q[2])),
            optional(d.map(|d| d[0])),
            optional(d.map(|d| d[1])),
        )
        .expect("writing to string cannot fail");
    }
    out
}

/// Plain-text summary table.
pub fn render_table(table: &SummaryTable) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<8} {:>7} {:>7} {:>14} {:>15} {:>11}",
        "pricer", "clear%", "common", "rounds (se)", "q1/med/q3", "p10/p90"
    )
    .unwrap();
    for row in &table.rows {
        let rounds = match (row.mean_rounds, row.rounds_se) {
            (Some(mean), Some(se)) => format!("{mean:.2} ({se:.2})"),
            (Some(mean), None) => format!("{mean:.2} (-)"),
            _ => "-".to_string(),
        };
        let quarts = match row.quartiles {
            Some([q1, q2, q3]) => format!("{q1:.1}/{q2:.1}/{q3:.1}"),
            None => "-".to_string(),
        };
        let decs = match row.deciles {
            Some([p10, p90]) => format!("{p10:.1}/{p90:.1}"),
            None => "-".to_string(),
        };
        writeln!(
            out,
            "{:<8} {:>7.1} {:>7} {:>14} {:>15} {:>11}",
            row.pricer, row.clearing_percent, row.common_cleared, rounds, quarts, decs
        )
        .unwrap();
    }
    out
}

fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)
}

const STREAM_INSTANCES: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_MCEM: u64 = 4;
const STREAM_DRAW: u64 = 5;

/// A ready-to-run batch: instances plus the prior fitted on held-out
/// bidders.
pub struct PreparedBatch {
    pub instances: Vec<AuctionInstance>,
    pub prior: PriorModel,
}

fn read_file(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn synthetic_pool(cfg: &ExperimentConfig, seed: u64) -> Result<BidderPool, HarnessError> {
    let file = generate_synthetic(
        cfg.synthetic_items,
        cfg.synthetic_bids,
        &cfg.synthetic_params,
        seed,
    );
    Ok(group_bidders(&file, cfg.mode)?)
}

/// Builds the instance batch and fits the prior.
///
/// Synthetic: each instance is its own generated economy (clearing prices
/// exist by construction) taken whole; the prior is fitted on a disjoint
/// run of generated files. The merged training pool is normalized once
/// and its scale applied to every instance, so prior and instances share
/// one unit system. CATS: all files are pooled, bidders split
/// train/test, the prior fitted on train, and instances sampled from
/// test.
pub fn prepare_batch(cfg: &ExperimentConfig) -> Result<PreparedBatch, HarnessError> {
    match &cfg.source {
        InstanceSource::Synthetic => {
            let mut train: Option<BidderPool> = None;
            for f in 0..cfg.train_files {
                let pool = synthetic_pool(cfg, derive_seed(cfg.seed, STREAM_TRAIN, f as u64))?;
                match &mut train {
                    None => train = Some(pool),
                    Some(t) => t.merge(&pool)?,
                }
            }
            let train = train.ok_or(HarnessError::Instance(InstanceError::EmptyPool))?;
            let train = normalize_values(&train)?;
            let prior = PriorModel::fit(&train, &HyperSearch::default())?;
            let mut instances = Vec::with_capacity(cfg.instance_count);
            for i in 0..cfg.instance_count {
                let seed = derive_seed(cfg.seed, STREAM_INSTANCES, i as u64);
                let pool = scale_values(&synthetic_pool(cfg, seed)?, train.scale())?;
                instances.push(instance_from_pool(
                    &pool,
                    seed,
                    DistributionTag::Synthetic,
                    "synthetic",
                )?);
            }
            Ok(PreparedBatch { instances, prior })
        }
        InstanceSource::Cats(paths) => {
            if paths.is_empty() {
                return Err(HarnessError::NoCatsFiles);
            }
            let mut pool: Option<BidderPool> = None;
            for path in paths {
                let text = read_file(path)?;
                let file = parse_cats(&text).map_err(|source| HarnessError::Cats {
                    path: path.clone(),
                    source,
                })?;
                let grouped = group_bidders(&file, cfg.mode)?;
                match &mut pool {
                    None => pool = Some(grouped),
                    Some(p) => p.merge(&grouped)?,
                }
            }
            let pool = normalize_values(&pool.expect("at least one file"))?;
            let (train, test) = split_train_test(
                &pool,
                cfg.train_fraction,
                derive_seed(cfg.seed, STREAM_SPLIT, 0),
            )?;
            let prior = PriorModel::fit(&train, &HyperSearch::default())?;
            let source_label = paths
                .iter()
                .map(|p| {
                    p.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| p.to_string_lossy().into_owned())
                })
                .collect::<Vec<_>>()
                .join("+");
            let mut instances = Vec::with_capacity(cfg.instance_count);
            for i in 0..cfg.instance_count {
                instances.push(sample_instance(
                    &test,
                    cfg.bidders_per_instance.min(test.bidders().len()),
                    derive_seed(cfg.seed, STREAM_DRAW, i as u64),
                    cfg.distribution,
                    &source_label,
                )?);
            }
            Ok(PreparedBatch { instances, prior })
        }
    }
}

struct CsvWriter {
    file: fs::File,
    path: PathBuf,
}

impl CsvWriter {
    fn create(path: PathBuf, header: &str) -> Result<CsvWriter, HarnessError> {
        let mut file = fs::File::create(&path).map_err(|source| HarnessError::Io {
            path: path.clone(),
            source,
        })?;
        writeln!(file, "{header}").map_err(|source| HarnessError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(CsvWriter { file, path })
    }

    fn line(&mut self, line: &str) -> Result<(), HarnessError> {
        writeln!(self.file, "{line}").and_then(|_| self.file.flush()).map_err(|source| {
            HarnessError::Io { path: self.path.clone(), source }
        })
    }
}

fn write_text(path: PathBuf, text: &str) -> Result<(), HarnessError> {
    fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })
}

/// Everything one auction run produced.
struct RunRecord {
    row: ResultRow,
    trace: String,
    millis: f64,
}

/// Runs `job` over instance indices on up to `workers` threads, handing
/// results to `flush` strictly in index order. The first error aborts
/// the batch after earlier indices have been flushed.
fn pooled_instance_runs<F>(
    count: usize,
    workers: usize,
    job: &F,
    mut flush: impl FnMut(usize, Vec<RunRecord>) -> Result<(), HarnessError>,
) -> Result<(), HarnessError>
where
    F: Fn(usize) -> Result<Vec<RunRecord>, HarnessError> + Sync,
{
    let workers = workers.max(1);
    let indices: Vec<usize> = (0..count).collect();
    for chunk in indices.chunks(workers) {
        let outputs: Vec<Result<Vec<RunRecord>, HarnessError>> = if workers == 1 {
            chunk.iter().map(|&i| job(i)).collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&i| scope.spawn(move || job(i)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker thread panicked"))
                    .collect()
            })
        };
        for (&index, output) in chunk.iter().zip(outputs) {
            flush(index, output?)?;
        }
    }
    Ok(())
}

/// Runs one pricer kind on one instance. `batch_gamma` and `cells` feed
/// the tuned subgradient variants; per-instance tuning falls back to the
/// batch step size on instances nothing cleared.
fn run_one(
    cfg: &ExperimentConfig,
    prior: &PriorModel,
    kind: PricerKind,
    index: usize,
    instance: &AuctionInstance,
    batch_gamma: f64,
    cells: &[TuningCell],
) -> Result<(ResultRow, String), HarnessError> {
    let profile = &instance.profile;
    let mut mcem = cfg.mcem.clone();
    mcem.seed = derive_seed(cfg.seed, STREAM_MCEM, index as u64);
    let mut bayes;
    let mut sg;
    let pricer: &mut dyn Pricer = match kind {
        PricerKind::Bayes => {
            bayes = BayesPricer::new(prior.clone(), profile.bidder_count(), cfg.beta, mcem)?;
            &mut bayes
        }
        PricerKind::SgBatch => {
            sg = SubgradientPricer::new(batch_gamma);
            &mut sg
        }
        PricerKind::SgPerInstance => {
            let gamma = best_cell_for_instance(cells, index)
                .map(|(g, _)| g)
                .unwrap_or(batch_gamma);
            sg = SubgradientPricer::new(gamma);
            &mut sg
        }
    };
    let outcome = run_auction(profile, pricer, cfg.round_cap).map_err(|source| {
        HarnessError::Auction { instance: index, pricer: kind.label(), source }
    })?;
    let row = ResultRow {
        instance: index,
        distribution: instance.tag.to_string(),
        pricer: kind.label().to_string(),
        cleared: outcome.cleared,
        rounds: outcome.rounds,
        efficiency: outcome.efficiency,
    };
    let trace = render_trace(&outcome.trace);
    Ok((row, trace))
}

/// Everything a finished experiment produced.
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub timings: Vec<TimingRow>,
    pub summary: SummaryTable,
    pub table: String,
    /// Batch-tuned step size, when a subgradient pricer ran.
    pub batch_gamma: Option<f64>,
}

/// Runs the configured pricers over the batch and writes all outputs.
/// Rows are flushed to `results.csv` as they complete, so a mid-run
/// failure leaves the finished prefix on disk.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    if cfg.pricers.is_empty() {
        return Err(HarnessError::NoPricers);
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|source| HarnessError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let batch = prepare_batch(cfg)?;

    let needs_tuning = cfg
        .pricers
        .iter()
        .any(|p| matches!(p, PricerKind::SgBatch | PricerKind::SgPerInstance));
    let grid = stepsize_grid(cfg.gamma_count, cfg.gamma_max);
    let cells = if needs_tuning {
        sweep_stepsizes(&batch.instances, &grid, cfg.round_cap)
    } else {
        Vec::new()
    };
    let batch_gamma = if needs_tuning {
        Some(batch_gamma_from_cells(&cells, &grid))
    } else {
        None
    };

    let mut results = CsvWriter::create(cfg.output_dir.join("results.csv"), RESULTS_HEADER)?;
    let mut timing_file =
        CsvWriter::create(cfg.output_dir.join("timing.csv"), "instance,pricer,millis")?;
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let gamma_fallback = batch_gamma.unwrap_or(cfg.gamma_max);
    let cells_ref = &cells;
    let batch_ref = &batch;
    let job = move |index: usize| -> Result<Vec<RunRecord>, HarnessError> {
        let instance = &batch_ref.instances[index];
        let mut records = Vec::with_capacity(cfg.pricers.len());
        for &kind in &cfg.pricers {
            let started = Instant::now();
            let (row, trace) =
                run_one(cfg, &batch_ref.prior, kind, index, instance, gamma_fallback, cells_ref)?;
            let millis = started.elapsed().as_secs_f64() * 1e3;
            records.push(RunRecord { row, trace, millis });
        }
        Ok(records)
    };
    pooled_instance_runs(batch.instances.len(), cfg.workers, &job, |index, records| {
        for record in records {
            results.line(&result_line(&record.row))?;
            timing_file.line(&format!("{},{},{}", index, record.row.pricer, record.millis))?;
            if cfg.write_traces {
                write_text(
                    cfg.output_dir
                        .join(format!("trace_{}_{index:04}.txt", record.row.pricer)),
                    &record.trace,
                )?;
            }
            timings.push(TimingRow {
                instance: index,
                pricer: record.row.pricer.clone(),
                millis: record.millis,
            });
            rows.push(record.row);
        }
        Ok(())
    })?;

    let summary = summarize(&rows);
    let table = render_table(&summary);
    write_text(cfg.output_dir.join("summary.csv"), &summary_csv(&summary))?;
    write_text(cfg.output_dir.join("summary.txt"), &table)?;
    Ok(ExperimentOutput { rows, timings, summary, table, batch_gamma })
}

/// One point of the sample-size sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub samples: usize,
    pub clearing_percent: f64,
    pub mean_rounds: Option<f64>,
    pub rounds_se: Option<f64>,
}

/// Sweep output: per-ℓ rows (for downstream comparisons) plus the
/// plot-ready points.
pub struct SweepOutput {
    pub per_samples_rows: Vec<(usize, Vec<ResultRow>)>,
    pub points: Vec<SweepPoint>,
}

/// Runs the belief-driven pricer at each sample count on the identical
/// instance batch and seeds, and writes `sweep.csv`.
pub fn sweep_sample_size(
    cfg: &ExperimentConfig,
    sample_counts: &[usize],
) -> Result<SweepOutput, HarnessError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|source| HarnessError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let batch = prepare_batch(cfg)?;
    let mut per_samples_rows = Vec::new();
    let mut points = Vec::new();
    let mut csv = CsvWriter::create(
        cfg.output_dir.join("sweep.csv"),
        "samples,clearing_percent,mean_rounds,rounds_se",
    )?;
    for &l in sample_counts {
        let mut sub = cfg.clone();
        sub.mcem.samples = l;
        let mut rows = Vec::new();
        let sub_ref = &sub;
        let batch_ref = &batch;
        let job = move |index: usize| -> Result<Vec<RunRecord>, HarnessError> {
            let started = Instant::now();
            let (row, trace) = run_one(
                sub_ref,
                &batch_ref.prior,
                PricerKind::Bayes,
                index,
                &batch_ref.instances[index],
                0.0,
                &[],
            )?;
            let millis = started.elapsed().as_secs_f64() * 1e3;
            Ok(vec![RunRecord { row, trace, millis }])
        };
        pooled_instance_runs(batch.instances.len(), cfg.workers, &job, |_, records| {
            for record in records {
                rows.push(record.row);
            }
            Ok(())
        })?;
        let summary = summarize(&rows);
        let head = &summary.rows[0];
        let point = SweepPoint {
            samples: l,
            clearing_percent: head.clearing_percent,
            mean_rounds: head.mean_rounds,
            rounds_se: head.rounds_se,
        };
        csv.line(&format!(
            "{},{},{},{}",
            point.samples,
            point.clearing_percent,
            optional(point.mean_rounds),
            optional(point.rounds_se),
        ))?;
        per_samples_rows.push((l, rows));
        points.push(point);
    }
    Ok(SweepOutput { per_samples_rows, points })
}

/// Writes `count` synthetic CATS files into the output directory and
/// returns their paths.
pub fn generate_synthetic_files(
    cfg: &ExperimentConfig,
    count: usize,
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|source| HarnessError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let file = generate_synthetic(
            cfg.synthetic_items,
            cfg.synthetic_bids,
            &cfg.synthetic_params,
            derive_seed(cfg.seed, STREAM_INSTANCES, i as u64),
        );
        let path = cfg.output_dir.join(format!("synthetic_{i:04}.cats"));
        write_text(path.clone(), &serialize_cats(&file))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Parses flat `key = value` config text; `#` starts a comment, blank
/// lines are skipped.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut settings = BTreeMap::new();
    for (index, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| HarnessError::Config {
            line: index + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        settings.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(settings)
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value.parse().map_err(|_| HarnessError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

/// Applies `key = value` settings onto a config. Both the config file and
/// the CLI funnel through here, so they accept the same keys.
pub fn apply_settings(
    cfg: &mut ExperimentConfig,
    settings: &BTreeMap<String, String>,
) -> Result<(), HarnessError> {
    for (key, value) in settings {
        let bad = || HarnessError::BadValue { key: key.clone(), value: value.clone() };
        match key.as_str() {
            "source" => {
                cfg.source = match value.as_str() {
                    "synthetic" => InstanceSource::Synthetic,
                    "cats" => match &cfg.source {
                        InstanceSource::Cats(paths) => InstanceSource::Cats(paths.clone()),
                        InstanceSource::Synthetic => InstanceSource::Cats(Vec::new()),
                    },
                    _ => return Err(bad()),
                };
            }
            "cats_files" => {
                let paths: Vec<PathBuf> = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect();
                cfg.source = InstanceSource::Cats(paths);
            }
            "mode" => {
                cfg.mode = match value.as_str() {
                    "single" => BidderMode::SingleMinded,
                    "multi" => BidderMode::MultiMinded,
                    _ => return Err(bad()),
                };
            }
            "distribution" => {
                cfg.distribution = value.parse().map_err(|_| bad())?;
            }
            "instances" => cfg.instance_count = parse_as(key, value)?,
            "rounds" => cfg.round_cap = parse_as(key, value)?,
            "pricers" => {
                let mut kinds = Vec::new();
                for part in value.split(',') {
                    kinds.push(PricerKind::parse(part).ok_or_else(bad)?);
                }
                cfg.pricers = kinds;
            }
            "lambda" => cfg.mcem.lambda = parse_as(key, value)?,
            "samples" => cfg.mcem.samples = parse_as(key, value)?,
            "tolerance" => cfg.mcem.tolerance = parse_as(key, value)?,
            "max_iterations" => cfg.mcem.max_iterations = parse_as(key, value)?,
            "max_attempts" => cfg.mcem.max_attempts = parse_as(key, value)?,
            "normalize" => cfg.mcem.normalize = parse_bool(key, value)?,
            "warm_start" => cfg.mcem.warm_start = parse_bool(key, value)?,
            "beta" => cfg.beta = parse_as(key, value)?,
            "bidders" => cfg.bidders_per_instance = parse_as(key, value)?,
            "items" => cfg.synthetic_items = parse_as(key, value)?,
            "bids" => cfg.synthetic_bids = parse_as(key, value)?,
            "winners" => cfg.synthetic_params.bidders = parse_as(key, value)?,
            "train_files" => cfg.train_files = parse_as(key, value)?,
            "train_fraction" => cfg.train_fraction = parse_as(key, value)?,
            "gamma_count" => cfg.gamma_count = parse_as(key, value)?,
            "gamma_max" => cfg.gamma_max = parse_as(key, value)?,
            "seed" => cfg.seed = parse_as(key, value)?,
            "out" => cfg.output_dir = PathBuf::from(value),
            "traces" => cfg.write_traces = parse_bool(key, value)?,
            "workers" => cfg.workers = parse_as(key, value)?,
            _ => return Err(HarnessError::UnknownKey { key: key.clone() }),
        }
    }
    Ok(())
}

/// Layers defaults, an optional config file, and override pairs (the CLI)
/// into a final config.
pub fn config_from_sources(
    file_text: Option<&str>,
    overrides: &BTreeMap<String, String>,
) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(text) = file_text {
        let settings = parse_config_text(text)?;
        apply_settings(&mut cfg, &settings)?;
    }
    apply_settings(&mut cfg, overrides)?;
    Ok(cfg)
}

//! Command-line front end for the auction simulator.
//!
//! Verbs:
//!
//! * `run` compares the configured pricers over an instance batch and
//!   writes `results.csv`, `timing.csv`, `summary.csv`, `summary.txt`.
//! * `sweep-samples` reruns the belief-driven pricer at several Monte
//!   Carlo sample counts on the identical batch and writes `sweep.csv`.
//! * `tune-baseline` sweeps subgradient step sizes, prints the batch
//!   winner and per-instance table, and writes `tuning.csv`.
//! * `gen-synthetic` writes clearable synthetic auction files.
//! * `parse-cats` prints the shape of auction files.
//!
//! Every experiment flag mirrors a config key; `--config FILE` loads a
//! flat `key = value` file and flags given on the command line override
//! it. Exit status is 0 on full success and nonzero otherwise; `run` and
//! `sweep-samples` flush finished rows before aborting, so partial
//! output survives a failure.

use anyhow::Context;
use bica::cats::parse_cats;
use bica::harness::{
    config_from_sources, generate_synthetic_files, prepare_batch, run_experiment,
    sweep_sample_size, ExperimentConfig,
};
use bica::instance::{group_bidders, BidderMode};
use bica::subgradient::{
    batch_gamma_from_cells, best_cell_for_instance, stepsize_grid, sweep_stepsizes, tuning_csv,
};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "bica", version, about = "Iterative combinatorial auction simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare pricers over an instance batch.
    Run(ConfigArgs),
    /// Rerun the belief-driven pricer at several sample counts.
    SweepSamples(SweepArgs),
    /// Sweep subgradient step sizes over the batch.
    TuneBaseline(ConfigArgs),
    /// Write synthetic auction files.
    GenSynthetic(GenArgs),
    /// Print the shape of auction files.
    ParseCats(ParseArgs),
}

/// Experiment settings; every flag mirrors a config-file key.
#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value config file; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Instance source: synthetic | cats.
    #[arg(long)]
    source: Option<String>,
    /// Comma-separated CATS files (implies --source cats).
    #[arg(long)]
    cats_files: Option<String>,
    /// Bidder grouping: single | multi.
    #[arg(long)]
    mode: Option<String>,
    /// Distribution tag recorded in result rows.
    #[arg(long)]
    distribution: Option<String>,
    /// Instances in the batch.
    #[arg(long)]
    instances: Option<usize>,
    /// Round cap per auction.
    #[arg(long)]
    rounds: Option<usize>,
    /// Comma-separated pricers: bayes | sg-d | sg-i.
    #[arg(long)]
    pricers: Option<String>,
    /// Tilting strength of the price sampler.
    #[arg(long)]
    lambda: Option<f64>,
    /// Monte Carlo samples per price update.
    #[arg(long)]
    samples: Option<usize>,
    /// Relative price-change threshold that stops the inner loop.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Inner-loop iteration cap.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Sampler attempt cap before forced acceptance.
    #[arg(long)]
    max_attempts: Option<usize>,
    /// Tilt by the exact clearing potential instead of the cheap surplus proxy.
    #[arg(long)]
    normalize: Option<bool>,
    /// Start each price update from the previous round's prices.
    #[arg(long)]
    warm_start: Option<bool>,
    /// Probit sharpness of belief updates.
    #[arg(long)]
    beta: Option<f64>,
    /// Bidders drawn per instance from a CATS pool.
    #[arg(long)]
    bidders: Option<usize>,
    /// Items per synthetic file.
    #[arg(long)]
    items: Option<usize>,
    /// Bids per synthetic file.
    #[arg(long)]
    bids: Option<usize>,
    /// Winning bidders per synthetic file.
    #[arg(long)]
    winners: Option<usize>,
    /// Synthetic files pooled to fit the prior.
    #[arg(long)]
    train_files: Option<usize>,
    /// Train share of a CATS bidder pool.
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Step-size grid resolution.
    #[arg(long)]
    gamma_count: Option<usize>,
    /// Largest step size on the grid.
    #[arg(long)]
    gamma_max: Option<f64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-run round traces.
    #[arg(long)]
    traces: Option<bool>,
    /// Worker threads (outputs do not depend on this).
    #[arg(long)]
    workers: Option<usize>,
}

fn put<T: ToString>(map: &mut BTreeMap<String, String>, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        map.insert(key.to_string(), v.to_string());
    }
}

impl ConfigArgs {
    fn to_config(&self) -> anyhow::Result<ExperimentConfig> {
        let file_text = match &self.config {
            Some(path) => Some(
                fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?,
            ),
            None => None,
        };
        let mut overrides = BTreeMap::new();
        put(&mut overrides, "source", &self.source);
        put(&mut overrides, "cats_files", &self.cats_files);
        put(&mut overrides, "mode", &self.mode);
        put(&mut overrides, "distribution", &self.distribution);
        put(&mut overrides, "instances", &self.instances);
        put(&mut overrides, "rounds", &self.rounds);
        put(&mut overrides, "pricers", &self.pricers);
        put(&mut overrides, "lambda", &self.lambda);
        put(&mut overrides, "samples", &self.samples);
        put(&mut overrides, "tolerance", &self.tolerance);
        put(&mut overrides, "max_iterations", &self.max_iterations);
        put(&mut overrides, "max_attempts", &self.max_attempts);
        put(&mut overrides, "normalize", &self.normalize);
        put(&mut overrides, "warm_start", &self.warm_start);
        put(&mut overrides, "beta", &self.beta);
        put(&mut overrides, "bidders", &self.bidders);
        put(&mut overrides, "items", &self.items);
        put(&mut overrides, "bids", &self.bids);
        put(&mut overrides, "winners", &self.winners);
        put(&mut overrides, "train_files", &self.train_files);
        put(&mut overrides, "train_fraction", &self.train_fraction);
        put(&mut overrides, "gamma_count", &self.gamma_count);
        put(&mut overrides, "gamma_max", &self.gamma_max);
        put(&mut overrides, "seed", &self.seed);
        put(
            &mut overrides,
            "out",
            &self.out.as_ref().map(|p| p.display().to_string()),
        );
        put(&mut overrides, "traces", &self.traces);
        put(&mut overrides, "workers", &self.workers);
        Ok(config_from_sources(file_text.as_deref(), &overrides)?)
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated sample counts to sweep.
    #[arg(long, default_value = "1,2,4,8,16,32,64,128")]
    sample_counts: String,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of files to write.
    #[arg(long, default_value_t = 10)]
    count: usize,
}

#[derive(Args)]
struct ParseArgs {
    /// Files to inspect.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn cmd_run(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = args.to_config()?;
    let output = run_experiment(&cfg).inspect_err(|_| {
        eprintln!(
            "aborted; finished rows remain in {}",
            cfg.output_dir.join("results.csv").display()
        );
    })?;
    if let Some(gamma) = output.batch_gamma {
        println!("batch-tuned step size: {gamma}");
    }
    print!("{}", output.table);
    println!("outputs written under {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let cfg = args.config.to_config()?;
    let mut counts = Vec::new();
    for part in args.sample_counts.split(',') {
        let part = part.trim();
        counts.push(
            part.parse::<usize>()
                .with_context(|| format!("bad sample count {part:?}"))?,
        );
    }
    let sweep = sweep_sample_size(&cfg, &counts).inspect_err(|_| {
        eprintln!(
            "aborted; finished points remain in {}",
            cfg.output_dir.join("sweep.csv").display()
        );
    })?;
    println!(
        "{:<8} {:>7} {:>12} {:>10}",
        "samples", "clear%", "mean rounds", "se"
    );
    for point in &sweep.points {
        let mean = point
            .mean_rounds
            .map(|m| format!("{m:.2}"))
            .unwrap_or_else(|| "-".to_string());
        let se = point
            .rounds_se
            .map(|s| format!("{s:.2}"))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{:<8} {:>7.1} {:>12} {:>10}",
            point.samples, point.clearing_percent, mean, se
        );
    }
    Ok(())
}

fn cmd_tune(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = args.to_config()?;
    let batch = prepare_batch(&cfg)?;
    let grid = stepsize_grid(cfg.gamma_count, cfg.gamma_max);
    let cells = sweep_stepsizes(&batch.instances, &grid, cfg.round_cap);
    let batch_gamma = batch_gamma_from_cells(&cells, &grid);
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
    let path = cfg.output_dir.join("tuning.csv");
    fs::write(&path, tuning_csv(&cells))
        .with_context(|| format!("cannot write {}", path.display()))?;
    println!("batch-tuned step size: {batch_gamma}");
    println!("{:<9} {:>10} {:>7}", "instance", "gamma", "rounds");
    for index in 0..batch.instances.len() {
        match best_cell_for_instance(&cells, index) {
            Some((gamma, rounds)) => println!("{index:<9} {gamma:>10.4} {rounds:>7}"),
            None => println!("{index:<9} {:>10} {:>7}", "-", "-"),
        }
    }
    println!("full sweep written to {}", path.display());
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> anyhow::Result<()> {
    let cfg = args.config.to_config()?;
    let paths = generate_synthetic_files(&cfg, args.count)?;
    println!(
        "wrote {} files under {}",
        paths.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_parse(args: &ParseArgs) -> anyhow::Result<()> {
    for path in &args.files {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let file = parse_cats(&text)
            .with_context(|| format!("cannot parse {}", path.display()))?;
        let single = group_bidders(&file, BidderMode::SingleMinded)?;
        let multi = group_bidders(&file, BidderMode::MultiMinded)?;
        println!(
            "{}: goods={} dummy={} bids={} single-minded bidders={} multi-minded bidders={}",
            path.display(),
            file.goods,
            file.dummy,
            file.bids.len(),
            single.bidders().len(),
            multi.bidders().len()
        );
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::SweepSamples(args) => cmd_sweep(args),
        Command::TuneBaseline(args) => cmd_tune(args),
        Command::GenSynthetic(args) => cmd_gen(args),
        Command::ParseCats(args) => cmd_parse(args),
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use balancegen::experiments::{
    emit_report, make_toy_dataset, run_limited_data_sweep, ExperimentConfig, Pipeline, Stage,
};

#[derive(Parser)]
#[command(name = "balancegen", version, about = "GAN-based data balancing for image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Rerun stages whose stored outputs were produced by a different config.
    #[arg(long)]
    force: bool,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the dataset (split, subsample, toy rendering).
    Prepare(Common),
    /// Render the toy dataset described by the config into --out.
    Toy(Common),
    /// Train the conditional GAN.
    TrainGan(Common),
    /// Generate the synthetic dataset.
    Generate(Common),
    /// Score and filter synthetic samples with the real-only classifier.
    Filter(Common),
    /// Train every configured classifier strategy.
    TrainClf(Common),
    /// Evaluate classifiers on the test split and compute generator metrics.
    Evaluate(Common),
    /// Run everything and write results tables and plots.
    Report(Common),
    /// Limited-data sweep over the config's k values and seeds.
    Sweep(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run_stage(common: &Common, until: Stage) -> Result<()> {
    let config = load(common)?;
    let summary = Pipeline::new(config, common.force)?.run_until(until)?;
    for s in &summary.stages {
        println!("{:<22} {:?} {:.1}s", s.stage, s.status, s.runtime_seconds);
    }
    if let Some(report) = &summary.report {
        println!("results: {}", report.results_csv.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare(c) => run_stage(c, Stage::Prepare),
        Command::TrainGan(c) => run_stage(c, Stage::TrainGan),
        Command::Generate(c) => run_stage(c, Stage::Generate),
        Command::Filter(c) => run_stage(c, Stage::Filter),
        Command::TrainClf(c) => run_stage(c, Stage::TrainClf),
        Command::Evaluate(c) => run_stage(c, Stage::Evaluate),
        Command::Report(c) => {
            run_stage(c, Stage::Report)?;
            let config = load(c)?;
            // Also gather any sweep results living under the same root.
            let sweep = config.out_dir.join("sweep");
            if sweep.exists() {
                emit_report(&sweep, &sweep.join("report"))?;
            }
            Ok(())
        }
        Command::Toy(c) => {
            let config = load(c)?;
            let toy = config
                .dataset
                .source
                .toy
                .context("config has no [dataset.toy] section")?;
            let seed = config.dataset.source.toy_seed.unwrap_or(config.seed);
            let manifest = make_toy_dataset(&toy, seed, &config.out_dir)?;
            println!(
                "{} records -> {}",
                manifest.records.len(),
                config.out_dir.join("manifest.tsv").display()
            );
            Ok(())
        }
        Command::Sweep(c) => {
            let config = load(c)?;
            let k_values = config.sweep.k_values.clone();
            let outcome = run_limited_data_sweep(&config, &k_values, c.force)?;
            for row in &outcome.table.rows {
                println!(
                    "k={:<4} seed={:<6} {:<12} acc={:.4} macro={:.4}",
                    row.samples_per_class.unwrap_or(0),
                    row.seed,
                    row.method,
                    row.accuracy,
                    row.macro_accuracy
                );
            }
            for f in &outcome.failures {
                eprintln!("failed: k={} seed={}: {}", f.cell.k, f.cell.seed, f.error);
            }
            anyhow::ensure!(outcome.failures.is_empty(), "{} sweep cells failed", outcome.failures.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use equisim_core::harness::{
    check_condition, run_until, with_workers, ExperimentConfig, PipelineStage, StageStatus, BASE_CONDITIONS,
    WORKERS_ENV,
};

#[derive(Parser)]
#[command(name = "equisim", version, about = "Conjoint-to-equilibrium simulation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (all cores when unset).
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate true preferences.
    GenPrefs(RunArgs),
    /// Build training and hold-out choice designs.
    GenDesign(RunArgs),
    /// Calibrate errors and simulate choices.
    Simulate(RunArgs),
    /// Run both MCMC chains and filter the draws.
    Estimate(RunArgs),
    /// Convergence, recovery and predictive measures.
    Diagnose(RunArgs),
    /// Pre-compute scenario and best-response tables.
    Precompute {
        #[command(flatten)]
        run: RunArgs,
        /// Refuse markets with more complete scenarios than this.
        #[arg(long)]
        max_scenarios: Option<usize>,
    },
    /// Play the best-response games from every initial state.
    Play(RunArgs),
    /// Compute equilibrium measures and write measures.csv.
    Analyze(RunArgs),
    /// Full pipeline.
    Run(RunArgs),
    /// Recompute and cross-check the scenario counts.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Check every base condition instead of one config.
        #[arg(long)]
        all: bool,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn execute(args: RunArgs, until: PipelineStage, max_scenarios: Option<usize>) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(k) = max_scenarios {
        config.capacity.max_scenarios = k;
    }
    let report = with_workers(args.workers.filter(|&n| n > 0), || run_until(&config, &args.out, until))??;
    for e in &report.stages {
        let status = match e.status {
            StageStatus::Computed => "computed",
            StageStatus::Loaded => "loaded",
        };
        println!("rep{} {:<22} {status}", e.replication, e.stage);
    }
    for (key, m) in &report.rows {
        println!(
            "{} {:<5} {:<5} equilibria {:>4} (with flips {:>4}), differentiated {}, equality {}",
            key.replication,
            key.rule,
            key.paramset,
            m.n_equilibria_noflip,
            m.n_equilibria_flip,
            m.differentiation_share.map_or("-".into(), |v| format!("{v:.3}")),
            m.equality.map_or("-", |e| e.name()),
        );
    }
    println!("outputs in {}", report.dir.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenPrefs(a) => execute(a, PipelineStage::Preferences, None),
        Command::GenDesign(a) => execute(a, PipelineStage::Design, None),
        Command::Simulate(a) => execute(a, PipelineStage::Responses, None),
        Command::Estimate(a) => execute(a, PipelineStage::Estimation, None),
        Command::Diagnose(a) => execute(a, PipelineStage::Diagnostics, None),
        Command::Precompute { run, max_scenarios } => execute(run, PipelineStage::Tables, max_scenarios),
        Command::Play(a) => execute(a, PipelineStage::Nash, None),
        Command::Analyze(a) | Command::Run(a) => execute(a, PipelineStage::Metrics, None),
        Command::Validate { config, all } => {
            if all {
                println!("row  l  q  w          tau            a                k");
                for c in BASE_CONDITIONS {
                    let r = check_condition(c.n_features, 5, c.line_size, c.n_firms)?;
                    println!(
                        "{:>3} {:>2} {:>2} {:>2} {:>12} {:>12} {:>16}",
                        c.row, c.n_features, c.line_size, c.n_firms, r.n_products, r.n_lines, r.n_scenarios
                    );
                }
            } else {
                let config = load_config(&config)?;
                let r = config.validate()?;
                println!(
                    "tau = {}, a = {}, k = {}, k- = {}, base condition {}",
                    r.n_products,
                    r.n_lines,
                    r.n_scenarios,
                    r.n_partial,
                    r.row.map_or("custom".into(), |v| v.to_string())
                );
            }
            Ok(())
        }
    }
}

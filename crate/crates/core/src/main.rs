use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use afl_core::bounds::{evaluate, BoundInputs};
use afl_core::harness::experiment::PreparedExperiment;
use afl_core::harness::{
    crossover_report, export_experiment, export_sweep, run_experiment, run_sweep, ExperimentConfig,
    ExportFormat,
};
use afl_core::training::Rule;

/// Simulate asynchronous federated learning over unreliable channels and audit the
/// convergence bounds of the AUDG, PSURDG and SFL aggregation rules.
#[derive(Debug, Parser)]
#[command(name = "afl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the Monte Carlo experiment described by a config file.
    Run(RunArgs),
    /// Run the config once per point of its `[sweep]` axis.
    Sweep(RunArgs),
    /// Evaluate the analytic bounds for a config without training.
    Bounds(ConfigArg),
    /// Parse and validate a config file.
    Validate(ConfigArg),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Path to the TOML experiment config.
    config: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Path to the TOML experiment config.
    config: PathBuf,
    /// Override `monte_carlo.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `monte_carlo.runs`.
    #[arg(long)]
    runs: Option<u64>,
    /// Override `training.rules` (comma separated: sfl,audg,psurdg).
    #[arg(long, value_delimiter = ',')]
    rules: Option<Vec<Rule>>,
    /// Directory for result files; defaults to `output.dir`, then `results`.
    #[arg(long, env = "AFL_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Format of the metric files.
    #[arg(long, default_value = "csv")]
    format: ExportFormat,
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.monte_carlo.master_seed = seed;
        }
        if let Some(runs) = self.runs {
            cfg.monte_carlo.runs = runs;
        }
        if let Some(rules) = &self.rules {
            cfg.training.rules = rules.clone();
        }
        cfg.validate()?;
        let dir = self
            .output_dir
            .clone()
            .or_else(|| cfg.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("results"));
        Ok((cfg, dir))
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let (cfg, dir) = args.resolve()?;
    let result = run_experiment(&cfg)?;
    let files = export_experiment(&result, &dir, args.format, cfg.output.per_iteration)
        .with_context(|| format!("writing results to {}", dir.display()))?;
    println!(
        "L = {}  mu = {}  eta = {}  T = {}",
        result.constants.smoothness,
        result.constants.convexity,
        result.learning_rate,
        result.horizon
    );
    for rr in &result.rules {
        let a = &rr.aggregate;
        println!(
            "{:>7}: runs {:>4}  divergent {:>3}  mean gap {:.6e} ± {:.2e}  bound {:.6e}",
            rr.rule.as_str(),
            a.runs,
            a.divergent,
            a.final_loss_gap.mean,
            a.final_loss_gap.std_dev,
            a.bound()
        );
    }
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<()> {
    let (cfg, dir) = args.resolve()?;
    let result = run_sweep(&cfg)?;
    let crossover =
        if cfg.training.rules.contains(&Rule::Audg) && cfg.training.rules.contains(&Rule::Psurdg) {
            Some(crossover_report(&result)?)
        } else {
            None
        };
    let files = export_sweep(&result, crossover.as_ref(), &dir, args.format)
        .with_context(|| format!("writing results to {}", dir.display()))?;
    for row in result.rows() {
        println!(
            "{} = {:<8} {:>7}: mean gap {:.6e}  bound {:.6e}",
            row.axis,
            row.value,
            row.rule.as_str(),
            row.mean_final_loss_gap,
            row.bound
        );
    }
    if let Some(c) = &crossover {
        println!("theta sign agreement: {:.3}", c.agreement_rate);
    }
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(())
}

fn bounds(args: &ConfigArg) -> Result<()> {
    let cfg = load(&args.config)?;
    let prepared = PreparedExperiment::new(&cfg)?;
    let inputs = BoundInputs::analytic(
        prepared.constants,
        prepared.learning_rate,
        cfg.training.horizon,
        prepared.objective.weights(),
        &prepared.channel,
    )?;
    let report = evaluate(&inputs)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn validate(args: &ConfigArg) -> Result<()> {
    let cfg = load(&args.config)?;
    PreparedExperiment::new(&cfg)?;
    println!("{}: ok", args.config.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Bounds(a) => bounds(a),
        Command::Validate(a) => validate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (category, code) = err
                .chain()
                .find_map(|e| e.downcast_ref::<afl_core::Error>())
                .map(|e| (e.category(), e.exit_code()))
                .unwrap_or(("internal", 1));
            eprintln!("error[{category}]: {err:#}");
            ExitCode::from(code as u8)
        }
    }
}

//! `cipo-lab`: train, evaluate, export and sweep from the command line.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cipo_core::envs::PromptBank;
use cipo_core::harness::runner::read_replay_step;
use cipo_core::harness::{evaluate, export_correction_dataset, run_experiment, run_sweep};
use cipo_core::policy::PolicyParams;
use cipo_core::{Execution, ExperimentConfig, LabError, Preset};

#[derive(Debug, Parser)]
#[command(name = "cipo-lab", version, about = "CIPO and GRPO on synthetic verifiable-reward tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one preset and evaluate the final policy.
    Run(RunArgs),
    /// Evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Render one step's replay batch as correction prompts.
    ExportCorrections(ExportArgs),
    /// Run several seeds of several presets and write a median comparison.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `steps` from the configuration.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bank file; defaults to `bank.txt` next to the checkpoint.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,8,32")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    step: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Comma-separated preset names; all presets when omitted.
    #[arg(long, value_delimiter = ',')]
    presets: Vec<String>,
}

fn load_config(common: &Common) -> Result<ExperimentConfig, LabError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(steps) = common.steps {
        config.steps = steps;
    }
    Ok(config)
}

fn execution(common: &Common) -> Execution {
    if common.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn run(args: RunArgs) -> Result<(), LabError> {
    let mut config = load_config(&args.common)?;
    if let Some(name) = &args.preset {
        config.preset = name.parse()?;
    }
    let out = run_experiment(&config, Some(&args.common.out), execution(&args.common))?;
    let last = out.metrics.last();
    println!(
        "{} seed {}: {} steps, final train reward {:.4}, pass@1 {:.4}, rho {:.4}",
        config.preset,
        config.seed,
        out.metrics.len(),
        last.map_or(0.0, |m| m.base_mean_reward),
        out.eval.pass1,
        out.controller.rho()
    );
    println!("artifacts in {}", args.common.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), LabError> {
    let params = PolicyParams::load(&args.checkpoint)?;
    let bank_path = args.bank.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("bank.txt")
    });
    let bank = PromptBank::load(&bank_path)?;
    let report = evaluate(&params, &bank, args.samples, &args.k, args.seed, Execution::Parallel)?;
    let json = serde_json::to_string_pretty(&report)?;
    match args.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn export(args: ExportArgs) -> Result<(), LabError> {
    let bank = PromptBank::load(&args.run.join("bank.txt"))?;
    let batch = read_replay_step(&args.run, args.step)?;
    let n = export_correction_dataset(&batch, &bank, Some(args.step), &args.out)?;
    println!("wrote {n} correction records to {}", args.out.display());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), LabError> {
    let config = load_config(&args.common)?;
    let presets = if args.presets.is_empty() {
        Preset::ALL.to_vec()
    } else {
        args.presets
            .iter()
            .map(|p| p.parse())
            .collect::<Result<Vec<Preset>, _>>()?
    };
    let out = run_sweep(
        &config,
        &presets,
        args.seeds,
        Some(&args.common.out),
        execution(&args.common),
    )?;
    print!("{}", out.report());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::ExportCorrections(a) => export(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ LabError::Divergence { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

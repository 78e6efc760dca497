use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use fedaudit::sim::{
    dlg_csv, render_run, report, run_dlg_experiment, run_experiment, run_sweep, sweep_csv, DlgExperimentConfig,
    ExperimentConfig, OutputFormat, SweepConfig,
};
use fedaudit::{Error, Result};

#[derive(Parser)]
#[command(name = "fedaudit", version, about = "Federated free-rider simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write results into this directory instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Run a grid over beta, prune rate, noise variance and free-rider count.
    Sweep(Common),
    /// Evaluate gradient leakage under noise and pruning.
    Dlg(Common),
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn required(path: &Option<PathBuf>) -> Result<&Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))
}

fn emit(common: &Common, stem: &str, body: &str) -> Result<()> {
    match &common.out {
        None => {
            print!("{body}");
            Ok(())
        }
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("{stem}.{}", common.format.extension()));
            std::fs::write(&path, body)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run(c) => {
            let mut config = ExperimentConfig::load(required(&c.config)?)?;
            if let Some(seed) = c.seed {
                config.seed = seed;
            }
            let result = run_experiment(&config)?;
            emit(&c, "run", &render_run(&result, c.format)?)
        }
        Command::Sweep(c) => {
            let mut sweep: SweepConfig = read_json(required(&c.config)?)?;
            if let Some(seed) = c.seed {
                sweep.base.seed = seed;
            }
            let rows = run_sweep(&sweep)?;
            let body = match c.format {
                OutputFormat::Csv => sweep_csv(&rows),
                OutputFormat::Json => report::to_json(&rows)?,
            };
            emit(&c, "sweep", &body)
        }
        Command::Dlg(c) => {
            let mut config: DlgExperimentConfig = match &c.config {
                Some(path) => read_json(path)?,
                None => DlgExperimentConfig::default(),
            };
            if let Some(seed) = c.seed {
                config.seed = seed;
            }
            let result = run_dlg_experiment(&config)?;
            let body = match c.format {
                OutputFormat::Csv => dlg_csv(&result),
                OutputFormat::Json => report::to_json(&result)?,
            };
            if result.threshold_not_met {
                eprintln!("warning: defended threshold not met at desk scale");
            }
            emit(&c, "dlg", &body)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

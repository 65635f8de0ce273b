//! Command-line front end: `accountant`, `train` and `compare`.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_accountant, cmd_compare, cmd_train, CommandError, Comparison, ComparisonRow, ExperimentOutcome,
};
pub use config::{ExperimentConfig, VERSION};

use crate::error::Error;

#[derive(Debug, Parser)]
#[command(
    name = "dpsgd-adapt",
    version,
    about = "Private SGD experiments with scheduled noise and clipping"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config with flat dotted keys (a run manifest also works).
    #[arg(long)]
    pub config: Vec<PathBuf>,
    /// Override a key, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Privacy budget of a config, or σ0² for a target ε.
    Accountant(Common),
    /// Train and write metrics.json, trajectory.csv and manifest.json.
    Train(Common),
    /// Run several configs on one dataset and tabulate them.
    Compare(Common),
}

fn load_configs(common: &Common) -> Result<Vec<ExperimentConfig>, CommandError> {
    let mut overrides = Vec::new();
    for s in &common.set {
        overrides.push(config::parse_override(s).map_err(CommandError::Config)?);
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.into()));
    }
    let load = |p: Option<&std::path::Path>| ExperimentConfig::load(p, &overrides).map_err(CommandError::Config);
    if common.config.is_empty() {
        return Ok(vec![load(None)?]);
    }
    common.config.iter().map(|p| load(Some(p))).collect()
}

fn single(common: &Common) -> Result<ExperimentConfig, CommandError> {
    let mut configs = load_configs(common)?;
    if configs.len() > 1 {
        return Err(CommandError::Config(Error::Config(
            "this command takes one --config".into(),
        )));
    }
    Ok(configs.remove(0))
}

fn execute(cli: &Cli) -> Result<(), CommandError> {
    match &cli.command {
        Command::Accountant(common) => {
            let report = cmd_accountant(&single(common)?)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| CommandError::Runtime(e.into()))?;
            println!("{text}");
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out).map_err(|e| CommandError::Runtime(Error::io(out, e)))?;
                let path = out.join("accountant.json");
                std::fs::write(&path, format!("{text}\n")).map_err(|e| CommandError::Runtime(Error::io(&path, e)))?;
            }
        }
        Command::Train(common) => {
            let config = single(common)?;
            let out = common.out.clone().unwrap_or_else(commands::default_out);
            let outcome = cmd_train(&config, &out)?;
            println!(
                "accuracy {:.4}  auc {:.4}  ({} runs, written to {})",
                outcome.report.accuracy,
                outcome.report.auc,
                outcome.report.repetitions,
                out.display()
            );
        }
        Command::Compare(common) => {
            let configs = load_configs(common)?;
            let comparison = cmd_compare(&configs, common.out.as_deref())?;
            print!("{}", comparison.text);
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.error());
            e.exit_code()
        }
    }
}

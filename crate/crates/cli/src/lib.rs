//! Command-line front end: noise injection, training, evaluation and
//! reports over finished runs.

mod commands;
mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cwcl::config::{ExperimentConfig, StageMode};
use cwcl::corpus::NoiseKind;

pub use commands::{cmd_eval, cmd_inject, cmd_train, TrainOptions};
pub use report::{cmd_report, group_runs, ReportRow};

/// Exit status for invalid configuration.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: u8 = 3;

/// Environment variable naming the compute device.
pub const DEVICE_VAR: &str = "CWCL_DEVICE";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<cwcl::Error> for CliError {
    fn from(e: cwcl::Error) -> Self {
        if e.is_config_error() {
            Self::config(e.to_string())
        } else {
            Self::runtime(e.to_string())
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Parser)]
#[command(name = "cwcl", version, about = "Noisy-label training lab with channel-wise contrastive learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt the training labels and write the noise overlay.
    Inject(RunArgs),
    /// Train stage one and, unless `--stage 1-only`, stage two.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Validate the config and model shapes without training.
        #[arg(long)]
        dry_run: bool,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint's live and EMA weights on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory (`{run}/ckpt/stage*-*`).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Tabulate mean ± std test accuracy over finished runs and plot curves.
    Report {
        /// Run directories, each holding `summary.json`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for the table and plots.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

/// Config file plus one-to-one overrides of its keys.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub noise_kind: Option<NoiseKind>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// `full` or `1-only`.
    #[arg(long)]
    pub stage: Option<StageMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    /// Loads the config and applies the overrides. Relative dataset paths
    /// resolve against the config file's directory.
    pub fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = ExperimentConfig::load(&self.config)?;
        if let Some(v) = self.lambda {
            c.train.lambda = v;
        }
        if let Some(k) = self.noise_kind {
            c.noise.kind = k;
        }
        if let Some(r) = self.noise_rate {
            c.noise.rate = r;
        }
        if let Some(g) = self.gamma {
            c.train.gamma = g;
        }
        if let Some(s) = self.stage {
            c.stage = s;
        }
        if let Some(s) = self.seed {
            c.set_seed(s);
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        c.validate()?;
        Ok(c)
    }

    pub fn base_dir(&self) -> PathBuf {
        self.config.parent().map(PathBuf::from).unwrap_or_default()
    }
}

/// Only the CPU is supported; anything else is a configuration error.
pub fn check_device() -> Result<(), CliError> {
    match std::env::var(DEVICE_VAR) {
        Err(_) => Ok(()),
        Ok(v) if v.eq_ignore_ascii_case("cpu") || v.is_empty() => Ok(()),
        Ok(v) => Err(CliError::config(format!("{DEVICE_VAR}={v} is not available; this build runs on the cpu only"))),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    check_device()?;
    match cli.command {
        Command::Inject(args) => {
            let config = args.load()?;
            let rate = cmd_inject(&config, &args.base_dir())?;
            println!("empirical noise rate {rate:.4}");
            Ok(())
        }
        Command::Train { run, dry_run, resume } => {
            let config = run.load()?;
            cmd_train(&config, &run.base_dir(), TrainOptions { dry_run, resume, stop_after: None })?;
            Ok(())
        }
        Command::Eval { config, checkpoint } => {
            let base = config.parent().map(PathBuf::from).unwrap_or_default();
            let c = ExperimentConfig::load(&config)?;
            let (live, ema) = cmd_eval(&c, &base, &checkpoint)?;
            println!("live {live:.4}\nema {ema:.4}");
            Ok(())
        }
        Command::Report { runs, out } => {
            let table = cmd_report(&runs, &out)?;
            print!("{table}");
            Ok(())
        }
    }
}

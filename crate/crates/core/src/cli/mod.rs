//! Command-line front end: `simulate`, `calibrate`, `estimate` and
//! `evaluate` over one working directory.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 solver failure. Commands overwrite their outputs, so reruns with the
//! same configuration and seed reproduce them.

pub mod commands;
pub mod config;
pub mod files;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("solver: {0}")]
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) | CliError::EmptyInput(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mvtrack", version, about = "Rig calibration and multi-view object pose estimation")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Working directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a rig, a board sequence and object frames with ground truth.
    Simulate,
    /// Solve extrinsics and clock offsets from board observations.
    Calibrate {
        /// NAME=REF,CAM,... cameras sharing a hardware clock; repeatable.
        #[arg(long = "sync-group")]
        sync_group: Vec<String>,
    },
    /// Estimate object poses per frame.
    Estimate {
        /// Camera subset such as OL,OR,C; repeatable.
        #[arg(long)]
        views: Vec<String>,
        #[arg(long)]
        single_view: bool,
        #[arg(long)]
        multi_view: bool,
        #[arg(long)]
        refine_depth: bool,
    },
    /// Compare estimates with ground truth.
    Evaluate,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed.or(cfg.seed) {
        cfg.apply_seed(seed);
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = Some(jobs);
    }
    if let Some(out) = &cli.output {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cfg.jobs {
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Calibrate { sync_group } => {
            let groups = sync_group.iter().map(|g| commands::parse_sync_group(g)).collect::<Result<Vec<_>, _>>()?;
            commands::calibrate(&cfg, &groups)
        }
        Command::Estimate { views, single_view, multi_view, refine_depth } => {
            let flags = commands::EstimateFlags {
                views: views.iter().map(|v| commands::parse_views(v)).collect(),
                single_view: *single_view,
                multi_view: *multi_view,
                refine_depth: *refine_depth,
            };
            commands::estimate(&cfg, &flags)
        }
        Command::Evaluate => commands::evaluate(&cfg).map(|_| ()),
    })
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
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
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

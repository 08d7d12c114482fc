//! `dml`: fit, simulate, forecast and diagnose cross-fitted double machine
//! learning models on panel data.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Globals;

/// Failure classes; each maps to one exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Estimation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Estimation(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Data(m) => ("data", m),
            CliError::Estimation(m) => ("estimation", m),
        };
        write!(f, "error[{kind}]: {}", msg.replace(['\n', '\r'], " "))
    }
}

#[derive(Parser)]
#[command(name = "dml", version, about = "Cross-fitted double machine learning for panel data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed (overrides `options.seed` and `synth.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a run directory.
    Fit { config: PathBuf },
    /// Generate a synthetic panel and its ground truth.
    Synth { config: PathBuf },
    /// Treatment-aware forecasts from a fitted run.
    Forecast {
        config: PathBuf,
        /// Run directory written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Planned treatments CSV.
        #[arg(long)]
        plan: PathBuf,
    },
    /// Recompute diagnostics for a run directory.
    Diagnose { fit_dir: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let g = Globals {
        out: cli.out,
        seed: cli.seed,
    };
    match &cli.command {
        Command::Fit { config } => commands::fit(config, &g),
        Command::Synth { config } => commands::synth(config, &g),
        Command::Forecast { config, fit, plan } => commands::forecast(config, fit, plan, &g),
        Command::Diagnose { fit_dir } => commands::diagnose_dir(fit_dir, &g),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::Config(first.trim_start_matches("error: ").to_string()));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

//! `panelfx` batch front-end.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use panelfx_core::calendar::WindowLabel;

use commands::{resolve_out, Command, Run};
use config::RunConfig;
use error::CliError;

/// Environment variable holding the default output root.
const OUT_ENV: &str = "PANELFX_OUT";

#[derive(Debug, Parser)]
#[command(name = "panelfx", version, about = "Synthetic-control panel effect estimation")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir` and PANELFX_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for simulation and placebo inference.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated window labels, e.g. `3m,18m`.
    #[arg(long)]
    windows: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.simulate.seed = seed;
        cfg.pipeline.inference.seed = seed;
    }
    if let Some(w) = &cli.windows {
        cfg.pipeline.windows = WindowLabel::parse_list(w).map_err(|e| CliError::Config {
            field: "--windows".into(),
            message: e.to_string(),
        })?;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(CliError::failed)?;
    }
    let out = resolve_out(cli.out.as_deref(), &cfg, std::env::var_os(OUT_ENV).map(PathBuf::from));
    Run::new(cli.command, cfg, out).execute()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}

//! `fastdiff` — simulate reaction-diffusion systems with stochastic Neumann
//! boundary noise and verify their fast-diffusion limit equations.

use clap::{Args, Parser, Subcommand};
use fastdiff_cli::commands::{self, exit_code, RunContext};
use fastdiff_cli::config::{preset, Config, PRESETS};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fastdiff",
    version,
    about = "Boundary-noise reaction-diffusion simulator and fast-diffusion limit verifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to a JSON config (or a report.json with an embedded config).
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Built-in preset name (heat-case1, heat-case2, autocat-case1,
    /// autocat-case2).
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,

    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads; FASTDIFF_WORKERS is honored when absent.
    #[arg(long)]
    workers: Option<usize>,

    /// Override the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the noise-induced limit constants and the effective drift.
    Constants {
        #[command(flatten)]
        common: Common,
        /// Also run the independent brute-force series oracle.
        #[arg(long)]
        oracle: bool,
    },
    /// Simulate one full-system trajectory at the first epsilon.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Integrate the effective limit equation on its own.
    Limit {
        #[command(flatten)]
        common: Common,
    },
    /// Run the Monte-Carlo epsilon sweep against the limit equation.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Averaging statistics of a fast OU mode.
    Average {
        #[command(flatten)]
        common: Common,
    },
}

fn load_context(common: &Common) -> fastdiff_core::Result<RunContext> {
    let mut config = match (&common.config, &common.preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                fastdiff_core::Error::Config(format!("reading {}: {e}", path.display()))
            })?;
            Config::from_json(&text)?
        }
        (None, Some(name)) => preset(name)?,
        (None, None) => {
            return Err(fastdiff_core::Error::Config(format!(
                "pass --config PATH or --preset NAME (presets: {})",
                PRESETS.join(", ")
            )))
        }
        (Some(_), Some(_)) => unreachable!("clap enforces the conflict"),
    };
    // flags override config fields
    if let Some(seed) = common.seed {
        config.experiment.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output.dir = out.display().to_string();
    }
    let workers = common
        .workers
        .or_else(|| std::env::var("FASTDIFF_WORKERS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    let out_dir = PathBuf::from(&config.output.dir);
    Ok(RunContext { config, workers, out_dir })
}

fn run(cli: Cli) -> fastdiff_core::Result<()> {
    match &cli.command {
        Command::Constants { common, oracle } => {
            commands::cmd_constants(&load_context(common)?, *oracle)
        }
        Command::Simulate { common } => commands::cmd_simulate(&load_context(common)?),
        Command::Limit { common } => commands::cmd_limit(&load_context(common)?),
        Command::Sweep { common } => commands::cmd_sweep(&load_context(common)?),
        Command::Average { common } => commands::cmd_average(&load_context(common)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}

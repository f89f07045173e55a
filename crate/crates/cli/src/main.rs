mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, PhaseSpec, RunConfig, SEED_ENV};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "dynhmc", version, about = "Dynamic HMC sampling, exact transition laws and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides NUTS_SEED and the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    chains: Option<usize>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Step size.
    #[arg(long, global = true, allow_negative_numbers = true)]
    h: Option<f64>,
    /// Maximum tree depth.
    #[arg(long = "k-m", global = true)]
    k_m: Option<u32>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run chains and write draws as CSV plus a JSON summary.
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Run verification suites.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: Option<String>,
        /// Run the suites on a deliberately broken kernel (negative control).
        #[arg(long, hide = true)]
        mutate: bool,
    },
    /// Print the exact one-step law at a phase point.
    Pmf {
        #[command(flatten)]
        common: Common,
        /// Position, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        q: Option<Vec<f64>>,
        /// Momentum, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        p: Option<Vec<f64>>,
    },
    /// Evaluate the step-size conditions.
    Conditions {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        l1: Option<f64>,
        /// Trajectory length for the contraction condition.
        #[arg(long)]
        steps: Option<u32>,
        #[arg(long)]
        m1: Option<f64>,
        #[arg(long)]
        a1: Option<f64>,
    },
    /// Time every kernel kind.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, suite: Option<String>, mutate: bool) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    let overrides = Overrides {
        seed: common.seed,
        chains: common.chains,
        iters: common.iters,
        out: common.out.clone(),
        suite,
        h: common.h,
        k_m: common.k_m,
        mutate,
    };
    config.apply(overrides, std::env::var(SEED_ENV).ok())?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sample { common } => commands::cmd_sample(&load(&common, None, false)?),
        Command::Verify { common, suite, mutate } => commands::cmd_verify(&load(&common, suite, mutate)?),
        Command::Pmf { common, q, p } => {
            let mut config = load(&common, None, false)?;
            match (q, p) {
                (Some(q), Some(p)) => config.phase = Some(PhaseSpec { q, p }),
                (None, None) => {}
                _ => return Err(CliError::config("--q and --p must be given together")),
            }
            commands::cmd_pmf(&config)
        }
        Command::Conditions { common, l1, steps, m1, a1 } => {
            let config = load(&common, None, false)?;
            let mut params = commands::stepsize_params(&config)?;
            if let Some(h) = common.h {
                params.h = h;
            }
            if common.k_m.is_some() {
                params.k_m = common.k_m;
            }
            params.l1 = l1.or(params.l1);
            params.steps = steps.or(params.steps);
            params.m1 = m1.or(params.m1);
            params.a1 = a1.or(params.a1);
            if !(params.h > 0.0 && params.h.is_finite()) {
                return Err(CliError::config("h: must be positive and finite"));
            }
            commands::cmd_conditions(params, &config)
        }
        Command::Bench { common } => commands::cmd_bench(&load(&common, None, false)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

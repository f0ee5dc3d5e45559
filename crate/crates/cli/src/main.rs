//! `phylograd` command-line interface. Every subcommand reads one TOML run
//! configuration; see `fixtures/run.toml` for the schema.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, Context};
use config::{Mode, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "phylograd", version, about = "Phylogenetic likelihood, gradients, L-BFGS and HMC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the log-likelihood and pattern statistics.
    Loglik(Common),
    /// Write branch gradients and Hessian diagonals as CSV.
    Gradient(Common),
    /// Maximize the likelihood over branch lengths with L-BFGS.
    Optimize(Common),
    /// Sample the relaxed-clock posterior with the requested kernels.
    Sample(Common),
    /// Simulate an alignment on the configured tree and model.
    Simulate(Common),
    /// Time analytic against finite-difference gradients.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated kernels for `sample`.
    #[arg(long, value_delimiter = ',')]
    kernels: Option<Vec<String>>,
    /// HMC iterations for `sample`.
    #[arg(long)]
    iterations: Option<usize>,
    /// Worker threads for multi-chain sampling.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn run(mode: Mode, args: &Common, hash: &mut Option<String>) -> Result<(), CliError> {
    let mut config = RunConfig::load(&args.config).map_err(CliError::Config)?;
    config.apply(&Overrides {
        seed: args.seed,
        output: args.output.clone(),
        kernels: args.kernels.clone(),
        iterations: args.iterations,
    });
    let ctx = Context::new(config);
    *hash = Some(ctx.hash.clone());
    let data = commands::load(&ctx.config, mode)?;
    match mode {
        Mode::Loglik => commands::loglik(&ctx, &data),
        Mode::Gradient => commands::gradient(&ctx, &data),
        Mode::Optimize => commands::optimize(&ctx, &data),
        Mode::Sample => commands::sample(&ctx, &data, args.workers.max(1)),
        Mode::Simulate => commands::simulate(&ctx, &data),
        Mode::Bench => commands::bench(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = CliError::Config(vec![e.to_string().trim().to_string()]);
            eprintln!("{}", err.to_json(None));
            return ExitCode::from(err.exit_code());
        }
    };
    let (mode, args) = match &cli.command {
        Command::Loglik(a) => (Mode::Loglik, a),
        Command::Gradient(a) => (Mode::Gradient, a),
        Command::Optimize(a) => (Mode::Optimize, a),
        Command::Sample(a) => (Mode::Sample, a),
        Command::Simulate(a) => (Mode::Simulate, a),
        Command::Bench(a) => (Mode::Bench, a),
    };
    let mut hash = None;
    match run(mode, args, &mut hash) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json(hash.as_deref()));
            ExitCode::from(err.exit_code())
        }
    }
}

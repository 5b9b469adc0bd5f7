use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndo_ness::run::{compare, exact_report, run, CompareMode, RunConfig};
use ndo_ness::Error;

/// Variational steady states of boundary-driven XXZ chains.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network density operator as described by a TOML config.
    Run {
        config: PathBuf,
        /// Enumerate the ΔSz = 0 sector instead of sampling.
        #[arg(long)]
        exact_sums: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iter: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Tabulate the final numbers of finished runs as CSV.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Accept runs that differ only in chain length.
        #[arg(long, conflicts_with = "allow_mixed")]
        length_sweep: bool,
        /// Accept runs of arbitrary instances.
        #[arg(long)]
        allow_mixed: bool,
    },
    /// Exact steady state of the configured instance, optionally scoring a
    /// checkpoint against it.
    Exact {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidConfiguration(_)
        | Error::InvalidChain(_)
        | Error::InvalidDrive(_)
        | Error::TooLarge { .. }
        | Error::IncompatibleRuns(_)
        | Error::Checkpoint(_)
        | Error::Io(_) => 1,
        _ => 2,
    }
}

fn to_json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

fn execute(command: Command) -> Result<String, Error> {
    match command {
        Command::Run { config, exact_sums, seed, max_iter, output, resume } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.exact_sums |= exact_sums;
            cfg.resume |= resume;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = max_iter {
                cfg.max_iterations = m;
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            Ok(to_json(&run(&cfg)?))
        }
        Command::Compare { dirs, length_sweep, allow_mixed } => {
            let mode = if allow_mixed {
                CompareMode::Mixed
            } else if length_sweep {
                CompareMode::LengthSweep
            } else {
                CompareMode::SameInstance
            };
            Ok(compare(&dirs, mode)?.1)
        }
        Command::Exact { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            Ok(to_json(&exact_report(&cfg, checkpoint.as_deref())?))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            println!("{}", out.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

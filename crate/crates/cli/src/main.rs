mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Globals;
use error::CliError;

/// Fit transport maps from prior to posterior and use them for inference.
#[derive(Debug, Parser)]
#[command(name = "bayesmap", version)]
struct Cli {
    /// TOML config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the data-parallel loops.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a map for the problem in --config.
    Fit,
    /// Push fresh source samples through a fitted map.
    Sample {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        n: usize,
        /// Output CSV (default: <out-dir>/samples.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Variance of T, evidence and KL estimates for a fitted map.
    Diagnose {
        #[arg(long)]
        map: PathBuf,
        /// Evaluation samples (default: n_eval from the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Bayes action under the decision problem in --config.
    Decide {
        #[arg(long)]
        map: PathBuf,
    },
    /// ROC curve and AUC from a CSV with `score` and `label` columns.
    Roc {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Run a named experiment scenario.
    Experiment { scenario: String },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::input("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::input(format!("cannot start thread pool: {e}")))?;
    }
    let g = Globals {
        config: cli.config,
        seed: cli.seed,
        out_dir: cli.out_dir,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Fit => commands::cmd_fit(&g),
        Command::Sample { map, n, out } => commands::cmd_sample(&g, &map, n, out.as_deref()),
        Command::Diagnose { map, n } => commands::cmd_diagnose(&g, &map, n),
        Command::Decide { map } => commands::cmd_decide(&g, &map),
        Command::Roc { scores } => commands::cmd_roc(&g, &scores),
        Command::Experiment { scenario } => commands::cmd_experiment(&g, &scenario),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::input(first).line());
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.kind as u8)
        }
    }
}

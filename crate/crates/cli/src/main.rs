use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nse_cli::{cmd_count, cmd_distribution, cmd_dump_benchmark, cmd_inspect, cmd_run, CliError};

/// Search-space evolution for multi-branch architecture search.
///
/// Exit codes: 0 success, 2 configuration error, 3 runtime failure.
/// `NSE_SEED` overrides the config's master seed.
#[derive(Parser)]
#[command(name = "nse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evolution loop and write per-round artifacts.
    Run {
        config: PathBuf,
        /// Output directory, overriding `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the exact number of architectures in the configured pool.
    Count { config: PathBuf },
    /// Sample architectures within a cost band and print `arch_id,cost,accuracy` CSV.
    Distribution {
        config: PathBuf,
        #[arg(long)]
        lo: f64,
        #[arg(long)]
        hi: f64,
        #[arg(short, long)]
        n: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize one round of a finished run.
    Inspect {
        run_dir: PathBuf,
        #[arg(long)]
        round: Option<usize>,
    },
    /// Write the synthetic benchmark's full table as JSON.
    DumpBenchmark {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(text: &str, out: Option<PathBuf>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out } => {
            let s = cmd_run(&config, out.as_deref())?;
            println!("rounds: {}", s.rounds);
            if let Some(b) = s.best_accuracy {
                println!("best in-constraint accuracy: {b:.6}");
            }
            println!("artifacts: {}", s.run_dir.display());
        }
        Command::Count { config } => {
            let (exact, approx) = cmd_count(&config)?;
            println!("exact: {exact}");
            println!("approx: {approx}");
        }
        Command::Distribution { config, lo, hi, n, out } => emit(&cmd_distribution(&config, lo, hi, n)?, out)?,
        Command::Inspect { run_dir, round } => print!("{}", cmd_inspect(&run_dir, round)?),
        Command::DumpBenchmark { config, out } => {
            let v = cmd_dump_benchmark(&config)?;
            emit(&(serde_json::to_string_pretty(&v).expect("json") + "\n"), out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hiercan_cli::commands::Command;
use hiercan_cli::config::Format;
use hiercan_cli::{run, Options};

/// Hierarchical Cannings process in a random environment.
#[derive(Parser, Debug)]
#[command(name = "hiercan", version, about)]
struct Cli {
    /// What to compute.
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (TOML, or JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override of `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replica-level parallelism.
    #[arg(long, env = "HIERCAN_WORKERS")]
    workers: Option<usize>,
    /// Output directory; results go to standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output encoding.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = Options {
        command: cli.command,
        config: cli.config,
        seed: cli.seed,
        workers: cli.workers,
        out: cli.out,
        format: cli.format,
    };
    match run(&opts, &mut std::io::stdout().lock()) {
        Ok(paths) => {
            for p in paths {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("{}", failure.to_json());
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}

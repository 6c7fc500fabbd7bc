use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qinn_cli::commands::{self, Command, RunOptions};
use qinn_cli::{report, CliError};

#[derive(Parser)]
#[command(name = "qinn", version, about = "Train, attack and compare quantum-inspired networks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed list such as `0,1,2` or `0-4`; overrides the config and QINN_SEED.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads for independent (seed, model) runs.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every listed model on the same (optionally corrupted) data.
    Train(Common),
    /// Train under a frozen parameter attack shared by all models.
    Attack(Common),
    /// Compare skip modes over several seeds.
    Ablate(Common),
    /// Aggregate finished run directories.
    Report {
        /// Run directories (searched recursively for summary.json).
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn options(c: Common) -> RunOptions {
    RunOptions {
        config: c.config,
        out: c.out,
        seeds: c.seeds,
        parallel: c.parallel,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result: Result<(), CliError> = match cli.command {
        Cmd::Train(c) => commands::run(Command::Train, &options(c)).map(drop),
        Cmd::Attack(c) => commands::run(Command::Attack, &options(c)).map(drop),
        Cmd::Ablate(c) => commands::run(Command::Ablate, &options(c)).map(drop),
        Cmd::Report { dirs, out } => report::run(&dirs, &out).map(drop),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `hpo`: run studies, comparison matrices and ledger reports from a TOML
//! config.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Exit status for configuration problems.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status for runs that started but could not finish.
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "hpo", version, about = "Hyperparameter optimization with TPE, LLM and hybrid samplers")]
struct Cli {
    /// Only print errors and the final summary.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `study.seed=7` or `seed=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to `output.dir` from the config).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Minimize,
    Maximize,
}

#[derive(Subcommand)]
enum Command {
    /// Run one study and write its ledger, CSV export and summary.
    Run(RunArgs),
    /// Run every sampler against every objective and write comparison CSVs.
    Matrix(RunArgs),
    /// Print iteration, score, best-so-far and source from a ledger.
    History {
        ledger: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Direction for best-so-far; read from a sibling summary.json when omitted.
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
    },
    /// Print a complete configuration with every default.
    DefaultConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    let status = match cli.command {
        Command::Run(a) => commands::run(&a.config, &a.overrides, a.output.as_deref()),
        Command::Matrix(a) => commands::matrix(&a.config, &a.overrides, a.output.as_deref()),
        Command::History { ledger, format, direction } => commands::history(
            &ledger,
            matches!(format, Format::Csv),
            direction.map(|d| match d {
                DirectionArg::Minimize => hpo_core::Direction::Minimize,
                DirectionArg::Maximize => hpo_core::Direction::Maximize,
            }),
        ),
        Command::DefaultConfig => {
            print!("{}", hpo_core::config::default_config_toml());
            Ok(())
        }
    };
    match status {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

//! The `dlr` command-line tool.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dlr_core::DlrError;

pub mod commands;
pub mod config;

pub use config::{Config, OutputFormat, Overrides};

pub const EXIT_OK: i32 = 0;
pub const EXIT_REJECTED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Dlr(#[from] DlrError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Box<CliError> },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Dlr(e) => e.code(),
            CliError::File { source, .. } => source.code(),
            CliError::Io { .. } => "IO_ERROR",
            CliError::Config(_) => "CONFIG_ERROR",
            CliError::Usage(_) => "USAGE_ERROR",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Dlr(e) if e.is_rejection() => EXIT_REJECTED,
            CliError::File { source, .. } => source.exit_code(),
            _ => EXIT_INPUT,
        }
    }

    /// Attributes a parse or validation failure to the file it came from.
    pub fn in_file(path: &Path) -> impl Fn(DlrError) -> CliError + '_ {
        move |e| CliError::File {
            path: path.to_path_buf(),
            source: Box::new(CliError::Dlr(e)),
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Parser)]
#[command(name = "dlr", version, about = "Discharge-loss-recovery flexibility aggregation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML file with defaults for tol, dt, format and seed.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Absolute numeric tolerance (overrides DLR_TOL and the config file).
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Report format on stdout.
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
    /// Seed for randomised output (window sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the packet of a fleet.
    Packet(commands::PacketArgs),
    /// Combine packets into one.
    Aggregate(commands::AggregateArgs),
    /// Reserve discharge energy from a packet.
    Reserve(commands::ReserveArgs),
    /// Check a discharge-then-recharge signal against a reservation.
    Check(commands::CheckArgs),
    /// Dispatch a signal on a fleet or aggregation tree.
    Simulate(commands::SimulateArgs),
    /// Windowed statistics of a request trace.
    Trace(commands::TraceArgs),
}

/// Result of a successful invocation.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Outcome {
    pub stdout: String,
    /// Diagnostic for a rejected request, printed on stderr.
    pub stderr: Option<String>,
    pub exit_code: i32,
}

pub fn execute(cli: &Cli, env_tol: Option<&str>) -> Result<Outcome, CliError> {
    let dt = match &cli.command {
        Command::Trace(a) => a.dt,
        _ => None,
    };
    let config = Config::resolve(
        cli.global.config.as_deref(),
        env_tol,
        &Overrides {
            tol: cli.global.tol,
            dt,
            format: cli.global.format,
            seed: cli.global.seed,
        },
    )?;
    match &cli.command {
        Command::Packet(a) => commands::packet(a, &config),
        Command::Aggregate(a) => commands::aggregate(a, &config),
        Command::Reserve(a) => commands::reserve(a, &config),
        Command::Check(a) => commands::check(a, &config),
        Command::Simulate(a) => commands::simulate(a, &config),
        Command::Trace(a) => commands::trace(a, &config),
    }
}

/// Parses `args`, runs the command and prints its output. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let env_tol = std::env::var("DLR_TOL").ok();
    match execute(&cli, env_tol.as_deref()) {
        Ok(out) => {
            print!("{}", out.stdout);
            if let Some(msg) = out.stderr {
                eprintln!("{msg}");
            }
            out.exit_code
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            e.exit_code()
        }
    }
}

//! The `speq` command line.
//!
//! Every subcommand takes its parameters from flags, optionally overridden
//! by a `key = value` file given with `--config`. Results go to stdout as
//! JSON or to CSV files under `--out`.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

pub use settings::{parse_complex, Settings};

/// Exit status for a failed assertion.
pub const EXIT_CHECK_FAILED: u8 = 2;
/// Exit status for usage, configuration and runtime errors.
pub const EXIT_ERROR: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Library(#[from] speq::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::CheckFailed(_) => EXIT_CHECK_FAILED,
            _ => EXIT_ERROR,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "speq", version, about = "Deterministic equivalents, free convolution and effective ridge")]
pub struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for CSV and plot outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; falls back to SPEQ_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` file overriding the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Also write a gnuplot script next to each CSV.
    #[arg(long, global = true)]
    pub gnuplot: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One fixed-point solve, JSON on stdout.
    Solve(SolveArgs),
    /// Density and CDF of the free convolution as CSV.
    Freeconv(FreeconvArgs),
    /// Sample spectra of simulated data matrices.
    Simulate(SimulateArgs),
    /// Preset Monte Carlo sweeps with pass/fail checks.
    Verify(VerifyArgs),
    /// Kolmogorov distance to the free convolution across sizes.
    Kolmogorov(KolmogorovArgs),
    /// Random-features debiasing experiment.
    Ridge(RidgeArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Aspect ratio p/n.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// `identity`, `zero`, a scalar or comma-separated eigenvalues.
    #[arg(long, allow_hyphen_values = true)]
    pub sigma: Option<String>,
    /// Dimension used to expand `sigma`.
    #[arg(long)]
    pub p: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Spectral parameter, e.g. `-1`, `0.5+1i` or `0.5,1`.
    #[arg(long, allow_hyphen_values = true)]
    pub z: Option<String>,
}

#[derive(Debug, Args)]
pub struct FreeconvArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Grid points on the support.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Check a density CSV against the fixed-point transform instead.
    #[arg(long, value_name = "DENSITY_CSV")]
    pub stieltjes_check: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub replicas: Option<usize>,
    /// `gaussian`, `rademacher` or `lipschitz`.
    #[arg(long)]
    pub dist: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub sigma: Option<String>,
    #[arg(long)]
    pub mean_norm: Option<f64>,
    /// `tanh` or `soft:<threshold>` for lipschitz columns.
    #[arg(long)]
    pub nonlinearity: Option<String>,
    /// Also write each replica as a binary matrix dump.
    #[arg(long)]
    pub dump: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub preset: Option<String>,
    /// Largest n of the doubling sweep from 64.
    #[arg(long)]
    pub nmax: Option<usize>,
}

#[derive(Debug, Args)]
pub struct KolmogorovArgs {
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub sigma: Option<String>,
    #[arg(long)]
    pub dist: Option<String>,
    /// Comma-separated ascending sizes.
    #[arg(long)]
    pub ns: Option<String>,
    #[arg(long)]
    pub replicas: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RidgeArgs {
    /// Full kernel matrix as headerless CSV.
    #[arg(long, conflicts_with_all = ["eigenvalues", "synthetic"])]
    pub kernel: Option<PathBuf>,
    /// Kernel eigenvalues, one per line; the problem is posed in the eigenbasis.
    #[arg(long, conflicts_with = "synthetic")]
    pub eigenvalues: Option<PathBuf>,
    /// Labels, one per line.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Generate a Laplace-kernel regression problem with this many samples.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of random features P.
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub replicas: Option<usize>,
    /// Query points: the training inputs most sensitive to the ridge.
    #[arg(long)]
    pub test_points: Option<usize>,
    /// `gaussian` or `lipschitz`.
    #[arg(long)]
    pub sampler: Option<String>,
}

/// Parses `argv`, runs the subcommand and maps the outcome to an exit code.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = CliError::Usage(first_line(&e.to_string()));
            eprintln!("error: {err}");
            return ExitCode::from(err.exit_code());
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", first_line(&err.to_string()));
            ExitCode::from(err.exit_code())
        }
    }
}

fn first_line(s: &str) -> String {
    let line = s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    line.strip_prefix("error: ").unwrap_or(line).to_string()
}

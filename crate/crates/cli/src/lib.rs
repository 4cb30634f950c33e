//! Command-line front end: argument parsing, config files, exit codes and the
//! per-subcommand pipelines.

mod commands;
mod config;

use std::path::PathBuf;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use xsmiss::{ErrorClass, YearMonth};

pub use commands::{cmd_backtest, cmd_diagnose, cmd_impute, cmd_simulate, cmd_synth, cmd_transform};
pub use config::expand_config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] xsmiss::Error),
    #[error("{failed} of {total} months failed; first failure: {first}")]
    Partial {
        failed: usize,
        total: usize,
        first: String,
        class: ErrorClass,
    },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let class = match self {
            CliError::Usage(_) => ErrorClass::Usage,
            CliError::Core(e) => e.class(),
            CliError::Partial { class, .. } => *class,
        };
        match class {
            ErrorClass::Usage => EXIT_USAGE,
            ErrorClass::Data => EXIT_DATA,
            ErrorClass::Numerical => EXIT_NUMERICAL,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Inclusive month range written `A:B`, e.g. `199001:199912`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonthRange {
    pub start: YearMonth,
    pub end: YearMonth,
}

impl FromStr for MonthRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(':').ok_or("expected A:B, e.g. 199001:199912")?;
        let start: YearMonth = a.trim().parse().map_err(|e| format!("{e}"))?;
        let end: YearMonth = b.trim().parse().map_err(|e| format!("{e}"))?;
        if end < start {
            return Err(format!("range {s} ends before it starts"));
        }
        Ok(MonthRange { start, end })
    }
}

/// Which predictors enter the cross-sections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PredictorChoice {
    All,
    /// The `n` predictors with the most observations over the month range.
    Top(usize),
    /// One predictor id per line.
    File(PathBuf),
}

impl FromStr for PredictorChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(PredictorChoice::All);
        }
        if let Some(n) = s.strip_prefix("top") {
            if let Ok(n) = n.parse::<usize>() {
                return if n == 0 { Err("top0 selects nothing".into()) } else { Ok(PredictorChoice::Top(n)) };
            }
        }
        Ok(PredictorChoice::File(PathBuf::from(s)))
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

/// A comma-separated list, e.g. `10,30,50`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_list(s).map(List)
    }
}

#[derive(Debug, Parser)]
#[command(name = "xsmiss", version, about = "Imputation, diagnostics, simulation and backtests for cross-sectional predictor panels")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat `key = value` file supplying defaults for any flag; flags on the command
    /// line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit and apply the per-month power transforms.
    Transform(TransformArgs),
    /// Impute every month of the panel.
    Impute(ImputeArgs),
    /// Correlation, spectrum and imputation-slope reports.
    Diagnose(DiagnoseArgs),
    /// Random-correlation dimensionality experiment.
    #[command(alias = "simlab")]
    Simulate(SimulateArgs),
    /// Rolling out-of-sample portfolio backtest.
    Backtest(BacktestArgs),
    /// Write a synthetic panel with a planted return signal.
    Synth(SynthArgs),
}

/// Flags shared by every panel-reading subcommand.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Long-format observations: stock_id,yyyymm,predictor,value.
    #[arg(long, value_name = "CSV")]
    pub input: PathBuf,
    /// Market data: stock_id,yyyymm,ret,mktcap.
    #[arg(long, value_name = "CSV")]
    pub returns: Option<PathBuf>,
    /// Predictor update periods: predictor,update_months.
    #[arg(long, value_name = "CSV")]
    pub meta: Option<PathBuf>,
    /// Industry codes: stock_id,industry.
    #[arg(long, value_name = "CSV")]
    pub industries: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "A:B")]
    pub months: Option<MonthRange>,
    /// `all`, `topN`, or a file listing predictor ids.
    #[arg(long, default_value = "top125")]
    pub predictors: PredictorChoice,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ImputerArgs {
    /// mean, group, last, em, ar1em or ppca.
    #[arg(long, default_value = "em")]
    pub method: xsmiss::imputers::Method,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long = "max-iter", default_value_t = 10000)]
    pub max_iter: usize,
    /// Latent factors of the ppca imputer.
    #[arg(long, default_value_t = 60)]
    pub factors: usize,
    /// Months used to estimate AR1 persistence.
    #[arg(long = "ar1-window", default_value_t = 60)]
    pub ar1_window: u32,
    /// Months searched back by the last-observed imputer.
    #[arg(long, default_value_t = 12)]
    pub lookback: u32,
}

#[derive(Debug, Clone, Args)]
pub struct TransformArgs {
    #[command(flatten)]
    pub run: RunConfig,
}

#[derive(Debug, Clone, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub run: RunConfig,
    #[command(flatten)]
    pub imputer: ImputerArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub run: RunConfig,
    /// Directory holding `sigma_<yyyymm>.csv` from an earlier impute run; without it
    /// the covariance is fitted here.
    #[arg(long, value_name = "DIR")]
    pub artifacts: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long = "max-iter", default_value_t = 10000)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Beta shape parameters, comma separated.
    #[arg(long, default_value = "1.2,4,15")]
    pub shape: List<f64>,
    #[arg(long = "J", default_value_t = 125)]
    pub j: usize,
    #[arg(long, default_value_t = 20)]
    pub sims: usize,
    /// Probability that a simulated cell is missing.
    #[arg(long = "miss-prob", default_value_t = 2.0 / 3.0)]
    pub miss_prob: f64,
    /// Mask rows per simulated matrix.
    #[arg(long, default_value_t = 1000)]
    pub rows: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BacktestArgs {
    #[command(flatten)]
    pub run: RunConfig,
    #[command(flatten)]
    pub imputer: ImputerArgs,
    /// pcr, spcr, ols or single.
    #[arg(long, default_value = "pcr")]
    pub forecaster: xsmiss::backtest::Forecaster,
    /// Component counts; each runs as its own strategy.
    #[arg(long = "K", default_value = "10")]
    pub k: List<usize>,
    /// Rolling estimation window in months.
    #[arg(long, default_value_t = 120)]
    pub window: usize,
    /// equal, value or both.
    #[arg(long, default_value = "equal")]
    pub weighting: String,
    /// Choose K on a validation sample each year instead of fixing it.
    #[arg(long)]
    pub tune: bool,
    #[arg(long, default_value = "10,30,50,70,90")]
    pub grid: List<usize>,
    /// Calendar month of the annual re-tuning.
    #[arg(long = "tune-month", default_value_t = 6)]
    pub tune_month: u32,
    /// Portfolio months; defaults to everything after the first window.
    #[arg(long, value_name = "A:B")]
    pub oos: Option<MonthRange>,
    /// Predictor of the single-predictor sort.
    #[arg(long)]
    pub predictor: Option<String>,
    /// imputed or observed (single-predictor sort only).
    #[arg(long, default_value = "imputed")]
    pub handling: String,
    #[arg(long = "leg-size", default_value_t = 500)]
    pub leg_size: usize,
    #[arg(long = "min-obs", default_value_t = 1000)]
    pub min_obs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 120)]
    pub months: usize,
    #[arg(long, default_value = "200001")]
    pub start: YearMonth,
    #[arg(long = "J", default_value_t = 30)]
    pub j: usize,
    /// Largest and smallest eigenvalue of the predictor covariance (linearly spaced).
    #[arg(long = "eig-max", default_value_t = 4.0)]
    pub eig_max: f64,
    #[arg(long = "eig-min", default_value_t = 0.2)]
    pub eig_min: f64,
    /// Rotate the eigenvectors randomly; otherwise the covariance is diagonal.
    #[arg(long)]
    pub rotate: bool,
    /// Number of leading components carrying return signal.
    #[arg(long = "signal-pcs", default_value_t = 0)]
    pub signal_pcs: usize,
    /// Return standard deviation contributed by each signal component.
    #[arg(long, default_value_t = 0.01)]
    pub signal: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub persistence: f64,
    #[arg(long = "miss-prob", default_value_t = 0.0)]
    pub miss_prob: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Parses `argv` (config file expanded) and runs the chosen subcommand.
pub fn run<I, S>(argv: I) -> CliResult<()>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv = expand_config(argv.into_iter().map(Into::into).collect())?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let parallel = match &cli.command {
        Command::Transform(a) => a.run.parallel,
        Command::Impute(a) => a.run.parallel,
        Command::Diagnose(a) => a.run.parallel,
        Command::Backtest(a) => a.run.parallel,
        Command::Simulate(a) => a.parallel,
        Command::Synth(_) => 1,
    };
    if parallel == 0 {
        return Err(CliError::Usage("--parallel must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Transform(a) => cmd_transform(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Backtest(a) => cmd_backtest(a),
        Command::Synth(a) => cmd_synth(a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn month_ranges() {
        let r: MonthRange = "199001:199912".parse().unwrap();
        assert_eq!(r.start.to_string(), "199001");
        assert!("199912:199001".parse::<MonthRange>().is_err());
        assert!("199001".parse::<MonthRange>().is_err());
    }

    #[test]
    fn predictor_choices() {
        assert_eq!("top125".parse::<PredictorChoice>().unwrap(), PredictorChoice::Top(125));
        assert_eq!("all".parse::<PredictorChoice>().unwrap(), PredictorChoice::All);
        assert_eq!(
            "topics.txt".parse::<PredictorChoice>().unwrap(),
            PredictorChoice::File("topics.txt".into())
        );
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::Core(xsmiss::Error::InsufficientData("x".into())).exit_code(), EXIT_DATA);
        assert_eq!(CliError::Core(xsmiss::Error::Singular("x".into())).exit_code(), EXIT_NUMERICAL);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let e = run(["xsmiss", "simulate", "--out", "/nonexistent", "--bogus"]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_USAGE);
    }
}

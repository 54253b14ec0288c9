use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use descent_mean::data::{Dataset, EstimatorConfig, Init, OraclePath};
use descent_mean::descent::estimate_mean;
use descent_mean::harness::{
    run_concentration, run_experiment, run_property_suite, write_concentration_csv, write_json,
    write_properties_csv, write_records_csv, ExperimentSpec,
};
use descent_mean::mt::{MtBackend, MtSolver};
use descent_mean::sdp::SdpConfig;
use descent_mean::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_PROPERTY: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "descent-mean", version, about = "Robust mean estimation and its experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the mean of the rows of a CSV file.
    Estimate(EstimateArgs),
    /// Run a benchmark described by a JSON spec.
    Bench(BenchArgs),
    /// Mass of the relaxation at the true mean for Gaussian bucket means.
    Conc(ConcArgs),
    /// Run the property suite; exits with status 2 if any check fails.
    Props(PropsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Mom,
    Zero,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Sdp,
    Exact,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Factored,
    Admm,
}

impl From<BackendArg> for MtBackend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Factored => MtBackend::Factored,
            BackendArg::Admm => MtBackend::Admm,
        }
    }
}

#[derive(clap::Args)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "factored")]
    backend: BackendArg,
    /// Absolute and relative tolerance of each relaxation solve.
    #[arg(long)]
    solver_tol: Option<f64>,
}

impl SolverArgs {
    fn solver(&self) -> MtSolver {
        let mut sdp = SdpConfig::descent();
        if let Some(t) = self.solver_tol {
            sdp.abs_tol = t;
            sdp.rel_tol = t;
        }
        MtSolver::new(self.backend.into(), sdp)
    }
}

#[derive(clap::Args)]
struct EstimateArgs {
    /// Samples, one per row, with an optional header.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    /// Number of buckets (default from delta).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value = "mom")]
    init: InitArg,
    #[arg(long, value_enum, default_value = "sdp")]
    path: PathArg,
    /// Iteration budget (default from the iteration rule).
    #[arg(long)]
    max_iters: Option<usize>,
    /// Shuffle the rows with this seed before bucketing.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Write the full run report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Per-trial CSV; overrides the spec's `output`, stdout if neither.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary JSON; printed to stderr if absent.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Record per-trial wall-clock time (makes the CSV run-dependent).
    #[arg(long)]
    timing: bool,
}

#[derive(clap::Args)]
struct ConcArgs {
    #[arg(long, default_value_t = 30)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Radius multipliers.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output, stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(clap::Args)]
struct PropsArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output, stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

/// Input and configuration problems map to the usage status, solver
/// breakdowns to the numerical one.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NotSymmetric { .. }
        | Error::NonFinite(_)
        | Error::NoConvergence { .. }
        | Error::DegenerateRelaxation
        | Error::EmptyBasis => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn estimate(args: &EstimateArgs) -> descent_mean::Result<u8> {
    let data = Dataset::read_csv_file(&args.input)?;
    let cfg = EstimatorConfig {
        delta: args.delta,
        k_override: args.k,
        init: match args.init {
            InitArg::Mom => Init::MedianOfMeans,
            InitArg::Zero => Init::Zero,
        },
        path: match args.path {
            PathArg::Sdp => OraclePath::Sdp,
            PathArg::Exact => OraclePath::Exact,
        },
        max_iters: args.max_iters,
        shuffle_before_bucketing: args.shuffle_seed.is_some(),
        shuffle_seed: args.shuffle_seed.unwrap_or(0),
        backend: args.solver.backend.into(),
        sdp: args.solver.solver().sdp,
        ..EstimatorConfig::desk()
    };
    let report = estimate_mean(&data, &cfg)?;
    if report.degraded_solves > 0 {
        eprintln!(
            "warning: {} relaxation solves stopped at the iteration limit",
            report.degraded_solves
        );
    }
    let row: Vec<String> = report.estimate.iter().map(|v| v.to_string()).collect();
    let mut out = io::stdout().lock();
    writeln!(out, "{}", row.join(","))?;
    if let Some(path) = &args.report {
        write_json(&report, BufWriter::new(File::create(path)?))?;
    }
    Ok(0)
}

fn bench(args: &BenchArgs) -> descent_mean::Result<u8> {
    let mut spec = ExperimentSpec::from_json(&std::fs::read_to_string(&args.spec)?)?;
    spec.timing |= args.timing;
    let result = run_experiment(&spec)?;
    let path = args.out.as_deref().or(spec.output.as_deref());
    write_records_csv(&result.records, output(path)?)?;
    match &args.summary {
        Some(p) => write_json(&result.summary, BufWriter::new(File::create(p)?))?,
        None => write_json(&result.summary, io::stderr())?,
    }
    Ok(0)
}

fn conc(args: &ConcArgs) -> descent_mean::Result<u8> {
    let rows = run_concentration(args.k, args.d, args.trials, &args.grid, args.seed, &args.solver.solver())?;
    write_concentration_csv(&rows, output(args.out.as_deref())?)?;
    Ok(0)
}

fn props(args: &PropsArgs) -> descent_mean::Result<u8> {
    let report = run_property_suite(args.seed, &args.solver.solver())?;
    for c in &report.checks {
        eprintln!(
            "{:<20} {} ({} of {} cases failed, worst {:e}, tolerance {:e})",
            c.name,
            if c.passed() { "pass" } else { "FAIL" },
            c.failures,
            c.cases,
            c.worst,
            c.tolerance
        );
    }
    write_properties_csv(&report, output(args.out.as_deref())?)?;
    Ok(if report.passed() { 0 } else { EXIT_PROPERTY })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_USAGE } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Bench(a) => bench(a),
        Command::Conc(a) => conc(a),
        Command::Props(a) => props(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

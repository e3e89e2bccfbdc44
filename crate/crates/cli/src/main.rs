use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;
mod output;

use error::CliError;
use output::Context;

/// Small-noise exit problems near an unstable equilibrium.
#[derive(Debug, Parser)]
#[command(name = "exitlab", version, about)]
struct Cli {
    /// Model config: a JSON file, or a preset name (linear-ou, linear-asym, cubic, varsigma).
    #[arg(long, global = true, value_name = "PATH")]
    model: Option<String>,

    /// Master seed; every path draws from a stream keyed by (seed, level, slot).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Worker threads (default: hardware parallelism).
    #[arg(long, global = true, env = "EXITLAB_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    /// Reduce batch results in path order. Reductions already run in path
    /// order, so outputs do not depend on the thread count; the flag is
    /// recorded in the manifest.
    #[arg(long, global = true)]
    deterministic_reduce: bool,

    /// Output file (stdout when absent). CSV outputs get a `.manifest.json` sidecar.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Deterministic flow S^t x and the conjugation at both ends.
    Flow(FlowArgs),
    /// Table of the linearizing conjugation f (CSV: x,f_of_x).
    Conjugation(ConjugationArgs),
    /// Independent exits from the interval (CSV: path_id,tau,side,censored).
    Simulate(SimulateArgs),
    /// Probability that the exit takes longer than (alpha/lambda) log(1/eps).
    Tail(TailArgs),
    /// Density of M(T') against its Gaussian limit (CSV: z,p_emp,p_ref,weighted_gap).
    Density(DensityArgs),
    /// Small-ball frequency of M(T_eps) near 0 against p(0) a.
    Smallball(SmallBallArgs),
    /// Closed-form constants for a model.
    Theory(TheoryArgs),
    /// Run the acceptance suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct FlowArgs {
    /// Start point.
    #[arg(long, allow_negative_numbers = true)]
    x: f64,
    /// Flow time (negative runs backwards).
    #[arg(long, allow_negative_numbers = true)]
    t: f64,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Debug, Args)]
struct ConjugationArgs {
    /// Number of grid points on [q-, q+] (at least 64).
    #[arg(long, default_value_t = 256)]
    grid: usize,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Fixed RK4 step.
    #[arg(long, default_value_t = 1e-3)]
    solver_dt: f64,
    /// Convergence tolerance of the conjugation limit.
    #[arg(long, default_value_t = 1e-11)]
    tol: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemeArg {
    Euler,
    Milstein,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// Time step.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, value_enum, default_value_t = SchemeArg::Euler)]
    scheme: SchemeArg,
    /// Censoring time (default depends on the command).
    #[arg(long)]
    max_time: Option<f64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Noise level.
    #[arg(long)]
    eps: f64,
    /// Start point in original coordinates.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x0: f64,
    /// Number of paths.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Also write the full trajectory (CSV: t,x) of this path.
    #[arg(long, value_name = "K")]
    dump_path: Option<usize>,
    /// Trajectory file for --dump-path (default: path-K.csv next to --out).
    #[arg(long, value_name = "PATH")]
    dump_out: Option<PathBuf>,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Direct,
    Splitting,
}

#[derive(Debug, Args)]
struct TailArgs {
    #[arg(long)]
    eps: f64,
    /// Horizon exponent; the horizon is (alpha/lambda) log(1/eps).
    #[arg(long)]
    alpha: f64,
    /// Start point in units of eps (X(0) = eps x).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Splitting)]
    method: MethodArg,
    /// Splitting levels (ignored by the direct method).
    #[arg(long, default_value_t = 6)]
    levels: usize,
    /// Paths per level (splitting) or in total (direct).
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    /// Also report exit-time residuals over this many linearized paths.
    #[arg(long, default_value_t = 0)]
    residuals: usize,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Debug, Args)]
struct DensityArgs {
    #[arg(long)]
    eps: f64,
    /// Start point in units of eps.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x: f64,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    /// lambda T' / log(1/eps).
    #[arg(long, default_value_t = 1.5)]
    exponent: f64,
    /// Kernel bandwidth (default: 1.06 sd n^(-1/5)).
    #[arg(long)]
    bandwidth: Option<f64>,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SignArg {
    Plus,
    Minus,
}

#[derive(Debug, Args)]
struct SmallBallArgs {
    #[arg(long)]
    eps: f64,
    /// Start point in units of eps.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x: f64,
    /// Ball radius exponent: a = c eps^theta.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, value_enum, default_value_t = SignArg::Plus)]
    sign: SignArg,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Debug, Args)]
struct TheoryArgs {
    #[arg(long)]
    eps: f64,
    /// Start point in units of eps.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x: f64,
    #[arg(long)]
    alpha: f64,
    /// Small-ball exponent for T_eps and the recursion schedule.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// quick runs only the eps >= 0.1 cases.
    #[arg(long, default_value = "quick")]
    suite: exitlab::verify::Suite,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {n} worker threads: {e}")))?;
    }
    let ctx = |command: &'static str| Context {
        command,
        seed: cli.seed,
        deterministic_reduce: cli.deterministic_reduce,
        out: cli.out.clone(),
        model: cli.model.clone(),
        start: Instant::now(),
    };
    match &cli.command {
        Command::Flow(a) => commands::flow(&ctx("flow"), a),
        Command::Conjugation(a) => commands::conjugation_table(&ctx("conjugation"), a),
        Command::Simulate(a) => commands::simulate(&ctx("simulate"), a),
        Command::Tail(a) => commands::tail(&ctx("tail"), a),
        Command::Density(a) => commands::density(&ctx("density"), a),
        Command::Smallball(a) => commands::smallball(&ctx("smallball"), a),
        Command::Theory(a) => commands::theory(&ctx("theory"), a),
        Command::Verify(a) => commands::verify(&ctx("verify"), a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

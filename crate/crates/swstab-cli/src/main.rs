//! Command-line front end for the switched-system feedback design library.
//!
//! Six subcommands cover the pipeline end to end: `random` draws a system,
//! `precheck` runs the a-priori structural verdict, `design` synthesizes
//! the gains, `verify` recomputes every certificate from the artifacts,
//! `simulate` runs the closed loop under a switching signal, and
//! `montecarlo` drives randomized experiments.
//!
//! Exit codes are a stable contract: 0 success, 1 I/O or validation
//! error, 2 design failure, 3 precheck verdict false, 4 verification
//! failure. Human-readable summaries go to stdout; machine-readable JSON
//! goes to files (or stdout where noted). No subcommand mutates its
//! inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use swstab::linalg::TolerancePolicy;
use swstab::model::{self, SwitchedSystem};
use swstab::montecarlo::{random_system, run_experiment, ExperimentSpec, MatrixDistribution};
use swstab::structural::genericity_precheck;
use swstab::triangularize::{design, DesignConfig, DesignError, LambdaSchedule};
use swstab::verify::{simulate, verify_design, SwitchingSignal};

const EXIT_OK: u8 = 0;
const EXIT_INVALID: u8 = 1;
const EXIT_DESIGN_FAILED: u8 = 2;
const EXIT_PRECHECK_FALSE: u8 = 3;
const EXIT_VERIFY_FAILED: u8 = 4;

#[derive(Parser)]
#[command(
    name = "swstab",
    version,
    about = "Stabilizing feedback design for discrete-time switched linear systems",
    long_about = "Designs per-subsystem state feedbacks that make all closed-loop matrices \
                  simultaneously upper-triangular with stable diagonals, yielding stability \
                  under arbitrary switching plus an explicit common quadratic Lyapunov function."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Design stabilizing feedback gains for a system file.
    Design(DesignArgs),
    /// Run the a-priori structural solvability check on a system file.
    Precheck(PrecheckArgs),
    /// Re-derive every certificate of a finished design from its files.
    Verify(VerifyArgs),
    /// Simulate the closed loop under a switching signal.
    Simulate(SimulateArgs),
    /// Draw a random switched system and write it as JSON.
    Random(RandomArgs),
    /// Run a randomized experiment over an ensemble of systems.
    Montecarlo(MontecarloArgs),
}

/// Numerical tolerance knobs shared by every subcommand.
#[derive(Args)]
struct TolArgs {
    /// Relative singular-value cutoff for rank decisions.
    #[arg(long = "tol-rank", default_value_t = 1e-10, global = true)]
    tol_rank: f64,
    /// Residual threshold for equation and certificate checks.
    #[arg(long = "tol-residual", default_value_t = 1e-8, global = true)]
    tol_residual: f64,
}

impl TolArgs {
    fn policy(&self) -> Result<TolerancePolicy, String> {
        TolerancePolicy::new(self.tol_rank, self.tol_residual, self.tol_residual)
            .map_err(|e| e.to_string())
    }
}

#[derive(Args)]
struct DesignArgs {
    /// System JSON file.
    system: PathBuf,
    /// Where to write the design JSON.
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Where to write the per-iteration trace JSON
    /// (default: the design path with a .trace.json extension).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Eigenvalue schedule: one value for all iterations, or a comma list
    /// with one value per iteration. Magnitudes must be below one.
    #[arg(long, value_parser = parse_lambda)]
    lambda: Option<LambdaSchedule>,
    /// Random eigenvalue probes to try per iteration when the scheduled
    /// values leave the kernel empty; zero disables probing.
    #[arg(long, default_value_t = 25)]
    probe_budget: u32,
    /// Seed for the probe streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Which ranked kernel direction becomes the common eigenvector.
    #[arg(long, default_value_t = 0)]
    kernel_index: usize,
    /// Record assignable-subspace diagnostics in the trace.
    #[arg(long)]
    diagnostic_subspaces: bool,
    #[command(flatten)]
    tol: TolArgs,
}

#[derive(Args)]
struct PrecheckArgs {
    /// System JSON file.
    system: PathBuf,
    /// Also write the full report JSON here.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Output on stdout: a human summary or the report JSON.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(flatten)]
    tol: TolArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// System JSON file.
    system: PathBuf,
    /// Design JSON file produced by `design`.
    design: PathBuf,
    /// Also write the full report JSON here.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    #[command(flatten)]
    tol: TolArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// System JSON file.
    system: PathBuf,
    /// Design JSON file produced by `design`.
    design: PathBuf,
    /// Steps to simulate (ignored for custom signals, which fix their own
    /// length).
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Switching signal: uniform, round-robin, fixed:<i>, or
    /// custom:<i,j,...> (1-based subsystem indices).
    #[arg(long, value_parser = parse_signal, default_value = "uniform")]
    signal: SignalSpec,
    /// Seed for the uniform signal.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial state as a comma list (default: all ones).
    #[arg(long, value_parser = parse_vector)]
    x0: Option<Vector>,
    /// Where to write the trajectory (stdout when omitted).
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Trajectory format.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(flatten)]
    tol: TolArgs,
}

#[derive(Args)]
struct RandomArgs {
    /// State dimension.
    #[arg(long)]
    n: usize,
    /// Input dimensions, one per subsystem, as a comma list.
    #[arg(long, value_delimiter = ',', required = true)]
    m: Vec<usize>,
    /// Draw seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entry distribution.
    #[arg(long, value_enum, default_value_t = Distribution::StandardNormal)]
    distribution: Distribution,
    /// Where to write the system JSON.
    #[arg(long, short = 'o')]
    out: PathBuf,
    #[command(flatten)]
    tol: TolArgs,
}

#[derive(Args)]
struct MontecarloArgs {
    /// Experiment spec JSON file; alternative to the inline flags.
    #[arg(long, conflicts_with_all = ["n", "m", "trials", "distribution"])]
    spec: Option<PathBuf>,
    /// State dimension.
    #[arg(long, required_unless_present = "spec")]
    n: Option<usize>,
    /// Input dimensions, one per subsystem, as a comma list.
    #[arg(long, value_delimiter = ',', required_unless_present = "spec")]
    m: Option<Vec<usize>>,
    /// Number of systems to draw.
    #[arg(long, required_unless_present = "spec")]
    trials: Option<usize>,
    /// Experiment master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entry distribution.
    #[arg(long, value_enum, default_value_t = Distribution::StandardNormal)]
    distribution: Distribution,
    /// Eigenvalue schedule for every trial's design.
    #[arg(long, value_parser = parse_lambda)]
    lambda: Option<LambdaSchedule>,
    /// Probe budget for every trial's design.
    #[arg(long, default_value_t = 25)]
    probe_budget: u32,
    /// Ranked kernel direction for every trial's design.
    #[arg(long, default_value_t = 0)]
    kernel_index: usize,
    /// Where to write the summary JSON.
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Also write per-trial rows as CSV here.
    #[arg(long)]
    trials_csv: Option<PathBuf>,
    #[command(flatten)]
    tol: TolArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Distribution {
    StandardNormal,
    Uniform,
}

impl From<Distribution> for MatrixDistribution {
    fn from(d: Distribution) -> Self {
        match d {
            Distribution::StandardNormal => MatrixDistribution::StandardNormal,
            Distribution::Uniform => MatrixDistribution::Uniform,
        }
    }
}

/// Parsed `--signal` value; realized once the subsystem count is known.
#[derive(Clone, Debug)]
enum SignalSpec {
    Uniform,
    RoundRobin,
    Fixed(usize),
    Custom(Vec<usize>),
}

/// Parsed `--x0` value.
#[derive(Clone, Debug)]
struct Vector(Vec<f64>);

fn parse_lambda(s: &str) -> Result<LambdaSchedule, String> {
    let values: Vec<f64> = s
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| format!("'{tok}' is not a number"))
        })
        .collect::<Result<_, _>>()?;
    match values.as_slice() {
        [] => Err("expected at least one eigenvalue".into()),
        [single] => Ok(LambdaSchedule::Constant(*single)),
        _ => Ok(LambdaSchedule::PerIteration(values)),
    }
}

fn parse_vector(s: &str) -> Result<Vector, String> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| format!("'{tok}' is not a number"))
        })
        .collect::<Result<Vec<f64>, _>>()
        .map(Vector)
}

fn parse_signal(s: &str) -> Result<SignalSpec, String> {
    if s == "uniform" {
        return Ok(SignalSpec::Uniform);
    }
    if s == "round-robin" {
        return Ok(SignalSpec::RoundRobin);
    }
    if let Some(rest) = s.strip_prefix("fixed:") {
        let index = rest
            .parse::<usize>()
            .map_err(|_| format!("'{rest}' is not a subsystem index"))?;
        return Ok(SignalSpec::Fixed(index));
    }
    if let Some(rest) = s.strip_prefix("custom:") {
        let sequence = rest
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|_| format!("'{tok}' is not a subsystem index"))
            })
            .collect::<Result<Vec<usize>, _>>()?;
        if sequence.is_empty() {
            return Err("custom signal must contain at least one index".into());
        }
        return Ok(SignalSpec::Custom(sequence));
    }
    Err("expected 'uniform', 'round-robin', 'fixed:<i>', or 'custom:<i,j,...>'".into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Design(args) => cmd_design(args),
        Command::Precheck(args) => cmd_precheck(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Random(args) => cmd_random(args),
        Command::Montecarlo(args) => cmd_montecarlo(args),
    };
    match code {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}

/// Reads and validates a system file; all errors are exit-1 material.
fn load_system(path: &Path, pol: &TolerancePolicy) -> Result<SwitchedSystem, String> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    model::system_from_json(&text, pol).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_design(path: &Path, pol: &TolerancePolicy) -> Result<model::FeedbackDesign, String> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    model::design_from_json(&text, pol).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, content: &str) -> Result<(), String> {
    fs::write(path, content).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn to_pretty_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serialization cannot fail")
}

fn cmd_design(args: DesignArgs) -> Result<u8, String> {
    let pol = args.tol.policy()?;
    let sys = load_system(&args.system, &pol)?;
    let cfg = DesignConfig {
        lambda: args.lambda.unwrap_or(LambdaSchedule::Constant(0.5)),
        kernel_index: args.kernel_index,
        probe_budget: args.probe_budget,
        seed: args.seed,
        diagnostic_subspaces: args.diagnostic_subspaces,
    };
    let trace_path = args
        .trace
        .clone()
        .unwrap_or_else(|| args.out.with_extension("trace.json"));
    match design(&sys, &cfg, &pol) {
        Ok(result) => {
            write_file(&args.out, &model::design_to_json(&result.design))?;
            write_file(&trace_path, &to_pretty_json(&result.records))?;
            let probed = result.records.iter().filter(|r| r.probed).count();
            println!(
                "design complete: {} iterations, {} probed",
                result.records.len(),
                probed
            );
            println!(
                "design written to {}, trace written to {}",
                args.out.display(),
                trace_path.display()
            );
            Ok(EXIT_OK)
        }
        Err(DesignError::InvalidConfig { detail }) => {
            Err(format!("invalid design configuration: {detail}"))
        }
        Err(err) => {
            // Partial trace: everything completed before the failure.
            if let DesignError::Failed { records, .. } = &err {
                write_file(&trace_path, &to_pretty_json(records))?;
                eprintln!("partial trace written to {}", trace_path.display());
            }
            eprintln!("design failed: {err}");
            Ok(EXIT_DESIGN_FAILED)
        }
    }
}

fn cmd_precheck(args: PrecheckArgs) -> Result<u8, String> {
    let pol = args.tol.policy()?;
    let sys = load_system(&args.system, &pol)?;
    let report = genericity_precheck(&sys, &pol);
    if let Some(out) = &args.out {
        write_file(out, &to_pretty_json(&report))?;
    }
    match args.format {
        Format::Json => println!("{}", to_pretty_json(&report)),
        _ => {
            println!(
                "rho = {:?}, q1 = {}, transverse = {}",
                report.rho, report.q1, report.transverse
            );
            println!(
                "verdict: {}",
                if report.verdict {
                    "true — a common eigenvector is guaranteed at every iteration"
                } else {
                    "false — the structural condition fails"
                }
            );
        }
    }
    Ok(if report.verdict {
        EXIT_OK
    } else {
        EXIT_PRECHECK_FALSE
    })
}

fn cmd_verify(args: VerifyArgs) -> Result<u8, String> {
    let pol = args.tol.policy()?;
    let sys = load_system(&args.system, &pol)?;
    let des = load_design(&args.design, &pol)?;
    let report = verify_design(&sys, &des, &pol).map_err(|e| e.to_string())?;
    if let Some(out) = &args.out {
        write_file(out, &to_pretty_json(&report))?;
    }
    for (i, radius) in report.spectral_radii.iter().enumerate() {
        let status = if *radius < 1.0 { "stable" } else { "UNSTABLE" };
        println!("subsystem {}: spectral radius {radius:.6} ({status})", i + 1);
    }
    println!(
        "eigenvalue match error {:.3e}, triangularity residual {:.3e}, cqlf margin {:.3e}",
        report.eigenvalue_match_error, report.triangularity_residual, report.cqlf_margin
    );
    println!("verdict: {}", if report.pass { "PASS" } else { "FAIL" });
    Ok(if report.pass { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8, String> {
    let pol = args.tol.policy()?;
    let sys = load_system(&args.system, &pol)?;
    let des = load_design(&args.design, &pol)?;
    let n_subsystems = sys.num_subsystems();
    let (signal, steps) = match &args.signal {
        SignalSpec::Uniform => (
            SwitchingSignal::uniform_random(n_subsystems, args.steps, args.seed),
            args.steps,
        ),
        SignalSpec::RoundRobin => (
            SwitchingSignal::round_robin(n_subsystems, args.steps),
            args.steps,
        ),
        SignalSpec::Fixed(index) => (
            SwitchingSignal::fixed(*index, args.steps, n_subsystems)
                .map_err(|e| e.to_string())?,
            args.steps,
        ),
        SignalSpec::Custom(sequence) => {
            let steps = sequence.len();
            (
                SwitchingSignal::custom(sequence.clone(), n_subsystems)
                    .map_err(|e| e.to_string())?,
                steps,
            )
        }
    };
    let x0 = match &args.x0 {
        Some(Vector(values)) => {
            if values.len() != sys.n() {
                return Err(format!(
                    "initial state has {} entries but the state dimension is {}",
                    values.len(),
                    sys.n()
                ));
            }
            DVector::from_column_slice(values)
        }
        None => DVector::from_element(sys.n(), 1.0),
    };
    let result = simulate(&sys, &des, &signal, &x0, steps, &pol).map_err(|e| e.to_string())?;
    let rendered = match args.format {
        Format::Json => render_trajectory_json(&result, signal.sequence()),
        _ => render_trajectory_csv(&result, signal.sequence()),
    };
    match &args.out {
        Some(path) => {
            write_file(path, &rendered)?;
            let v_note = match &result.lyapunov {
                Some(v) => format!(
                    ", V from {:.3e} to {:.3e}",
                    v.first().copied().unwrap_or(f64::NAN),
                    v.last().copied().unwrap_or(f64::NAN)
                ),
                None => ", no certified Lyapunov function".into(),
            };
            println!(
                "simulated {steps} steps, final |x| = {:.3e}{v_note}",
                result.states.last().map(|x| x.norm()).unwrap_or(f64::NAN)
            );
            println!("trajectory written to {}", path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(EXIT_OK)
}

/// Trajectory rows `k, i_k, x_1..x_n, V`; the final row carries no switch
/// index and values print with full round-trip precision.
fn render_trajectory_csv(result: &swstab::verify::SimulationResult, signal: &[usize]) -> String {
    let n = result.states.first().map(|x| x.len()).unwrap_or(0);
    let mut header = String::from("k,i_k");
    for j in 1..=n {
        header.push_str(&format!(",x_{j}"));
    }
    if result.lyapunov.is_some() {
        header.push_str(",V");
    }
    header.push('\n');
    let mut out = header;
    for (k, x) in result.states.iter().enumerate() {
        let i_k = signal.get(k).map(|i| i.to_string()).unwrap_or_default();
        out.push_str(&format!("{k},{i_k}"));
        for value in x.iter() {
            out.push_str(&format!(",{value:.16e}"));
        }
        if let Some(v) = &result.lyapunov {
            out.push_str(&format!(",{:.16e}", v[k]));
        }
        out.push('\n');
    }
    out
}

fn render_trajectory_json(result: &swstab::verify::SimulationResult, signal: &[usize]) -> String {
    #[derive(serde::Serialize)]
    struct Trajectory<'a> {
        signal: &'a [usize],
        states: Vec<Vec<f64>>,
        controls: Vec<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        lyapunov: &'a Option<Vec<f64>>,
    }
    let traj = Trajectory {
        signal,
        states: result.states.iter().map(|x| x.iter().copied().collect()).collect(),
        controls: result.controls.iter().map(|u| u.iter().copied().collect()).collect(),
        lyapunov: &result.lyapunov,
    };
    to_pretty_json(&traj)
}

fn cmd_random(args: RandomArgs) -> Result<u8, String> {
    let pol = args.tol.policy()?;
    let sys = random_system(args.n, &args.m, args.distribution.into(), args.seed, &pol)
        .map_err(|e| e.to_string())?;
    write_file(&args.out, &model::system_to_json(&sys))?;
    println!(
        "system with n = {}, m = {:?} written to {}",
        args.n,
        args.m,
        args.out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_montecarlo(args: MontecarloArgs) -> Result<u8, String> {
    let pol = args.tol.policy()?;
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            serde_json::from_str::<ExperimentSpec>(&text)
                .map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => ExperimentSpec {
            n: args.n.expect("clap enforces presence"),
            m: args.m.clone().expect("clap enforces presence"),
            trials: args.trials.expect("clap enforces presence"),
            seed: args.seed,
            distribution: args.distribution.into(),
            config: DesignConfig {
                lambda: args.lambda.clone().unwrap_or(LambdaSchedule::Constant(0.5)),
                kernel_index: args.kernel_index,
                probe_budget: args.probe_budget,
                ..DesignConfig::default()
            },
        },
    };
    let summary = run_experiment(&spec, &pol).map_err(|e| e.to_string())?;
    write_file(&args.out, &to_pretty_json(&summary))?;
    if let Some(path) = &args.trials_csv {
        write_file(path, &summary.trial_csv())?;
    }
    println!(
        "trials: {}, valid draws: {}, precheck true: {}",
        summary.spec.trials, summary.valid_draws, summary.precheck_true
    );
    println!(
        "design successes: {} ({} probed), verification passes: {}",
        summary.design_successes, summary.probed_designs, summary.verification_passes
    );
    println!(
        "theorem violations: {}, tolerance-marginal: {}, expected failures: {}",
        summary.theorem_violations.len(),
        summary.tolerance_marginal.len(),
        summary.expected_failures.len()
    );
    println!("summary written to {}", args.out.display());
    Ok(EXIT_OK)
}

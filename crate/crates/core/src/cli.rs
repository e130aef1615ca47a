//! Command-line experiment runner.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::baselines::{MpcPolicy, StageWeighting};
use crate::error::{Error, Result};
use crate::fitting::{quadratic_dominates, FitOptions, Loss};
use crate::iteration::{run_fvi, run_vgi, IterationConfig, IterationHistory, IterationRecord};
use crate::linalg::seeded_rng;
use crate::model::QuadraticFunction;
use crate::policy::{self, default_burn_in, CostEstimate, Policy, QadpPolicy};
use crate::problems::{
    BoxLqrParams, CommitmentsParams, ProblemConfig, ScalarLqrParams, SupplyChainParams,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "vgi", version, about = "Value-gradient iteration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run VGI, FVI or CE-MPC on a benchmark and write history, value and metadata.
    Run(RunArgs),
    /// Simulate a policy and report its average cost.
    Evaluate(EvaluateArgs),
    /// Compute the CE-LQR quadratic lower bound.
    Bound(BoundArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ProblemName {
    ScalarLqr,
    BoxLqr,
    Commitments,
    SupplyChain,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Vgi,
    Fvi,
    Mpc,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Switch {
    On,
    Off,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum LossName {
    Huber,
    Squared,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ProblemArgs {
    #[arg(long, value_enum)]
    problem: ProblemName,
    /// JSON file overriding problem parameters (missing fields keep defaults).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Seed for the problem instance and all simulations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct RunArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, value_enum, default_value = "vgi")]
    method: Method,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    /// Fitting points per iteration, N = K·T.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Number of rollouts K per iteration.
    #[arg(long, default_value_t = 1)]
    traj: usize,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, value_enum, default_value = "huber")]
    loss: LossName,
    #[arg(long, default_value_t = 1.0)]
    huber_m: f64,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    #[arg(long, default_value_t = 0.0)]
    lasso: f64,
    #[arg(long, value_enum, default_value = "on")]
    lower_bound: Switch,
    /// Force the linear term of the value function to zero.
    #[arg(long)]
    symmetric: bool,
    /// Let the value function depend on every state coordinate, including
    /// those the benchmark marks as irrelevant.
    #[arg(long)]
    all_coordinates: bool,
    /// CE-MPC horizon (mpc only).
    #[arg(long)]
    horizon: Option<usize>,
    /// Average the CE-MPC stage costs instead of summing them.
    #[arg(long)]
    mpc_average: bool,
    #[arg(long, default_value_t = 10_000)]
    eval_steps: usize,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Value-function JSON; the benchmark's initial value function when absent.
    #[arg(long)]
    value: Option<PathBuf>,
    /// Evaluate CE-MPC with this horizon instead of a quadratic policy.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long)]
    burn_in: Option<usize>,
    /// Write the trajectory (t, x, u, stage cost) as CSV.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BoundArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Where to write the lower bound JSON.
    #[arg(long, default_value = "lower_bound.json")]
    out: PathBuf,
    /// Value function to check for dominance over the bound.
    #[arg(long)]
    compare: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_)
        | Error::DimensionMismatch { .. }
        | Error::Serde(_)
        | Error::Io(_)
        | Error::Csv(_) => EXIT_USAGE,
        _ => EXIT_NUMERICAL,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Bound(a) => cmd_bound(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn problem_config(args: &ProblemArgs) -> Result<ProblemConfig> {
    fn load<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
        match path {
            Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
            None => Ok(T::default()),
        }
    }
    Ok(match args.problem {
        ProblemName::ScalarLqr => ProblemConfig::ScalarLqr(load::<ScalarLqrParams>(&args.params)?),
        ProblemName::BoxLqr => ProblemConfig::BoxLqr(load::<BoxLqrParams>(&args.params)?),
        ProblemName::Commitments => {
            ProblemConfig::Commitments(load::<CommitmentsParams>(&args.params)?)
        }
        ProblemName::SupplyChain => {
            ProblemConfig::SupplyChain(load::<SupplyChainParams>(&args.params)?)
        }
    })
}

fn read_value(path: &Path) -> Result<QuadraticFunction> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn burn_in_for(steps: usize, burn_in: Option<usize>) -> usize {
    burn_in.unwrap_or_else(|| default_burn_in(steps))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    if args.horizon.is_some() && args.method != Method::Mpc {
        return Err(usage("--horizon only applies to --method mpc"));
    }
    if args.mpc_average && args.method != Method::Mpc {
        return Err(usage("--mpc-average only applies to --method mpc"));
    }
    if args.traj == 0 || args.samples == 0 || !args.samples.is_multiple_of(args.traj) {
        return Err(usage("--samples must be a positive multiple of --traj"));
    }
    let config = problem_config(&args.problem)?;
    let bench = config.build(args.problem.seed)?;
    let loss = match args.loss {
        LossName::Huber => Loss::Huber { m: args.huber_m },
        LossName::Squared => Loss::Squared,
    };
    let fit = FitOptions {
        loss,
        ridge: args.ridge,
        lasso: args.lasso,
        symmetric: args.symmetric,
        lower_bound: (args.lower_bound == Switch::On).then(|| bench.lower_bound.clone()),
        coordinates: if args.all_coordinates {
            None
        } else {
            bench.fit_coordinates.clone()
        },
        ..FitOptions::default()
    };
    let iteration = IterationConfig {
        iterations: args.iters,
        trajectories: args.traj,
        steps: args.samples / args.traj,
        rho: args.rho,
        fit,
        seed: args.problem.seed,
        eval_steps: args.eval_steps,
        eval_burn_in: args.burn_in,
        eval_every: args.eval_every,
        workers: args.workers,
    };
    fs::create_dir_all(&args.out)?;

    let (history, value, error) = match args.method {
        Method::Vgi | Method::Fvi => {
            let outcome = if args.method == Method::Vgi {
                run_vgi(&bench.problem, &bench.initial_value, &iteration)
            } else {
                run_fvi(&bench.problem, &bench.initial_value, &iteration)
            };
            (outcome.history, Some(outcome.value), outcome.error)
        }
        Method::Mpc => {
            if args.eval_steps == 0 {
                return Err(usage("--method mpc needs --eval-steps > 0"));
            }
            let horizon = args.horizon.unwrap_or(30);
            let weighting = if args.mpc_average {
                StageWeighting::Average
            } else {
                StageWeighting::Sum
            };
            let mpc = MpcPolicy::new(&bench.problem, horizon, None, weighting)?;
            let burn_in = burn_in_for(args.eval_steps, args.burn_in);
            let cost = policy::average_cost(
                &bench.problem,
                &mpc,
                args.eval_steps,
                burn_in,
                args.problem.seed,
            )?;
            let history = IterationHistory {
                records: vec![IterationRecord {
                    iteration: 0,
                    policy_evals: 0,
                    cost: Some(cost),
                    fit_residual: None,
                    value: QuadraticFunction::zero(bench.problem.state_dim()),
                }],
            };
            (history, None, None)
        }
    };

    history.write_csv(fs::File::create(args.out.join("history.csv"))?)?;
    if let Some(v) = &value {
        write_json(&args.out.join("value.json"), v)?;
    }
    let final_cost = history.final_cost();
    let metadata = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": "run",
        "args": args,
        "problem": config,
        "moments": bench.moments,
        "iteration": iteration,
        "final_cost": final_cost,
        "completed_iterations": history.last().map(|r| r.iteration),
        "error": error.as_ref().map(|e| e.to_string()),
    });
    write_json(&args.out.join("metadata.json"), &metadata)?;
    if let Some(c) = final_cost {
        println!("average cost {:.6} ± {:.6}", c.mean, c.stderr);
    }
    match error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    if args.steps == 0 {
        return Err(usage("--steps must be positive"));
    }
    if args.horizon.is_some() && args.value.is_some() {
        return Err(usage("--horizon and --value are mutually exclusive"));
    }
    let burn_in = burn_in_for(args.steps, args.burn_in);
    if burn_in >= args.steps {
        return Err(usage("--burn-in must be smaller than --steps"));
    }
    let config = problem_config(&args.problem)?;
    let bench = config.build(args.problem.seed)?;
    let problem = &bench.problem;
    let seed = args.problem.seed;

    let mpc;
    let qadp;
    let policy: &dyn Policy = match args.horizon {
        Some(h) => {
            mpc = MpcPolicy::new(problem, h, None, StageWeighting::Sum)?;
            &mpc
        }
        None => {
            let v = match &args.value {
                Some(p) => read_value(p)?,
                None => bench.initial_value.clone(),
            };
            if v.dim() != problem.state_dim() {
                return Err(Error::DimensionMismatch {
                    what: "value function dim",
                    expected: problem.state_dim(),
                    got: v.dim(),
                });
            }
            qadp = QadpPolicy::new(problem, &v)?;
            &qadp
        }
    };
    let x0 = problem
        .initial_state()
        .sample(&mut seeded_rng(seed, policy::INITIAL_STATE_STREAM));
    let traj = policy::simulate(problem, policy, &x0, args.steps, seed)?;
    let cost: CostEstimate = policy::batch_means(&traj.costs, burn_in);
    if let Some(path) = &args.trajectory {
        write_trajectory(path, &traj)?;
    }
    println!("average cost {:.6} ± {:.6}", cost.mean, cost.stderr);
    println!(
        "{}",
        serde_json::to_string(&json!({ "problem": bench.name, "seed": seed, "cost": cost }))?
    );
    Ok(())
}

fn write_trajectory(path: &Path, traj: &policy::Trajectory) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let n = traj.states.first().map_or(0, |x| x.len());
    let m = traj.inputs.first().map_or(0, |u| u.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|j| format!("u{j}")));
    header.push("cost".into());
    wtr.write_record(&header)?;
    for (t, ((x, u), g)) in traj
        .states
        .iter()
        .zip(&traj.inputs)
        .zip(&traj.costs)
        .enumerate()
    {
        let row: Vec<String> = std::iter::once(t.to_string())
            .chain(x.iter().chain(u.iter()).map(|v| v.to_string()))
            .chain(std::iter::once(g.to_string()))
            .collect();
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn cmd_bound(args: &BoundArgs) -> Result<()> {
    let config = problem_config(&args.problem)?;
    let bench = config.build(args.problem.seed)?;
    let lb = &bench.lower_bound;
    write_json(&args.out, lb)?;
    println!("lower bound written to {}", args.out.display());
    if let Some(path) = &args.compare {
        let v = read_value(path)?;
        if v.dim() != lb.dim() {
            return Err(Error::DimensionMismatch {
                what: "compared value function dim",
                expected: lb.dim(),
                got: v.dim(),
            });
        }
        let dominates = quadratic_dominates(&v, lb)?;
        println!("dominates: {dominates}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> i32 {
        main_with_args(std::iter::once("vgi").chain(args.iter().copied()))
    }

    fn path(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(&["run", "--problem", "no-such-problem"]), EXIT_USAGE);
        assert_eq!(
            run(&["run", "--problem", "scalar-lqr", "--horizon", "5"]),
            EXIT_USAGE
        );
        assert_eq!(
            run(&[
                "run",
                "--problem",
                "scalar-lqr",
                "--samples",
                "7",
                "--traj",
                "2"
            ]),
            EXIT_USAGE
        );
        assert_eq!(
            run(&["run", "--problem", "scalar-lqr", "--rho", "1.5"]),
            EXIT_USAGE
        );
        assert_eq!(
            run(&[
                "evaluate",
                "--problem",
                "scalar-lqr",
                "--value",
                "/nonexistent.json"
            ]),
            EXIT_USAGE
        );
    }

    #[test]
    fn zero_iterations_write_one_history_row() {
        let dir = tempfile::tempdir().unwrap();
        let code = run(&[
            "run",
            "--problem",
            "scalar-lqr",
            "--iters",
            "0",
            "--eval-steps",
            "200",
            "--out",
            path(dir.path()),
        ]);
        assert_eq!(code, EXIT_OK);
        let csv = fs::read_to_string(dir.path().join("history.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "iteration,policy_evals,avg_cost,avg_cost_stderr,fit_residual"
        );
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("0,0,"));
        let value = read_value(&dir.path().join("value.json")).unwrap();
        assert_eq!(value.dim(), 1);
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("metadata.json")).unwrap())
                .unwrap();
        assert_eq!(meta["problem"]["problem"], "scalar-lqr");
        assert!(meta["final_cost"]["mean"].is_number());
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let outputs = |seed: &str| {
            let dir = tempfile::tempdir().unwrap();
            let code = run(&[
                "run",
                "--problem",
                "box-lqr",
                "--seed",
                seed,
                "--iters",
                "2",
                "--samples",
                "10",
                "--eval-steps",
                "200",
                "--out",
                path(dir.path()),
            ]);
            assert_eq!(code, EXIT_OK);
            (
                fs::read_to_string(dir.path().join("history.csv")).unwrap(),
                fs::read_to_string(dir.path().join("value.json")).unwrap(),
            )
        };
        assert_eq!(outputs("3"), outputs("3"));
        assert_ne!(outputs("3"), outputs("4"));
    }

    #[test]
    fn lower_bound_round_trips_through_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        let lb = dir.path().join("lb.json");
        let code = run(&[
            "bound",
            "--problem",
            "supply-chain",
            "--out",
            path(&lb),
            "--compare",
            path(&lb),
        ]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(read_value(&lb).unwrap().dim(), 8);
        let traj = dir.path().join("traj.csv");
        let code = run(&[
            "evaluate",
            "--problem",
            "supply-chain",
            "--value",
            path(&lb),
            "--steps",
            "100",
            "--trajectory",
            path(&traj),
        ]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(fs::read_to_string(&traj).unwrap().lines().count(), 101);
    }

    #[test]
    fn mismatched_value_dimension_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("v.json");
        write_json(&v, &QuadraticFunction::zero(2)).unwrap();
        assert_eq!(
            run(&[
                "evaluate",
                "--problem",
                "scalar-lqr",
                "--value",
                path(&v),
                "--steps",
                "50"
            ]),
            EXIT_USAGE
        );
    }
}

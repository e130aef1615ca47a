//! The VGI and FVI outer loops: closed-loop sampling, Bellman evaluation at
//! the visited states, fitting, damping and history logging.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{self, FitOptions, FitSample};
use crate::linalg::seeded_rng;
use crate::model::{ControlProblem, QuadraticFunction};
use crate::policy::{self, default_burn_in, rollout, CostEstimate, PolicyEvalResult, QadpPolicy};

/// Settings shared by VGI and FVI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub iterations: usize,
    /// Number of closed-loop rollouts `K` per iteration.
    pub trajectories: usize,
    /// Length `T` of each rollout; `N = K·T` states per iteration.
    pub steps: usize,
    /// Damping coefficient in `(0, 1]`.
    pub rho: f64,
    pub fit: FitOptions,
    pub seed: u64,
    /// Simulation length for the reported average cost; 0 disables it.
    pub eval_steps: usize,
    /// Defaults to a tenth of `eval_steps`.
    pub eval_burn_in: Option<usize>,
    /// Report the cost every this many iterations (and always after the last).
    pub eval_every: usize,
    /// Worker threads for rollouts; 0 uses the global pool.
    pub workers: usize,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            trajectories: 1,
            steps: 50,
            rho: 0.5,
            fit: FitOptions::default(),
            seed: 0,
            eval_steps: 10_000,
            eval_burn_in: None,
            eval_every: 1,
            workers: 0,
        }
    }
}

impl IterationConfig {
    /// `N = K·T`.
    pub fn samples_per_iter(&self) -> usize {
        self.trajectories * self.steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument(
                "need at least one trajectory of at least one step".into(),
            ));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "damping must lie in (0, 1], got {}",
                self.rho
            )));
        }
        if self.eval_steps > 0 && self.eval_steps <= self.burn_in() {
            return Err(Error::InvalidArgument(
                "eval_steps must exceed the burn-in".into(),
            ));
        }
        Ok(())
    }

    fn burn_in(&self) -> usize {
        self.eval_burn_in
            .unwrap_or_else(|| default_burn_in(self.eval_steps))
    }
}

/// Seed for everything random in iteration `k`; streams then separate rollouts.
pub fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    seed ^ (iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stream used for the average-cost simulation of an iteration.
const EVAL_STREAM: u64 = u64::MAX - 1;

/// States visited by the rollouts together with the policy evaluations there.
#[derive(Clone, Debug)]
pub struct Samples {
    pub states: Vec<DVector<f64>>,
    pub evaluations: Vec<PolicyEvalResult>,
    /// Last state of each rollout, used to start the next iteration.
    pub carry: Vec<DVector<f64>>,
}

/// Evaluations, visited states and final state of one rollout.
type Rollout = (Vec<PolicyEvalResult>, Vec<DVector<f64>>, DVector<f64>);

/// `K` closed-loop rollouts of length `T` under the QADP policy for `v`.
///
/// Rollout `k` uses stream `k` of `seed`; without `carry` its start is drawn
/// from the initial-state distribution on that stream.
pub fn collect_samples(
    problem: &ControlProblem,
    v: &QuadraticFunction,
    trajectories: usize,
    steps: usize,
    carry: Option<&[DVector<f64>]>,
    seed: u64,
) -> Result<Samples> {
    if let Some(c) = carry {
        if c.len() != trajectories {
            return Err(Error::InvalidArgument(format!(
                "carry has {} states for {trajectories} trajectories",
                c.len()
            )));
        }
    }
    let policy = QadpPolicy::new(problem, v)?;
    let runs: Vec<Result<Rollout>> = (0..trajectories)
        .into_par_iter()
        .map(|k| {
            let mut rng = seeded_rng(seed, k as u64);
            let x0 = match carry {
                Some(c) => c[k].clone(),
                None => problem.initial_state().sample(&mut rng),
            };
            let mut evals = Vec::with_capacity(steps);
            let (traj, last) = rollout(problem, &x0, steps, &mut rng, |_, x| {
                let r = policy.evaluate(x)?;
                let u = r.input.clone();
                evals.push(r);
                Ok(u)
            })?;
            Ok((evals, traj.states, last))
        })
        .collect();
    let mut out = Samples {
        states: Vec::with_capacity(trajectories * steps),
        evaluations: Vec::with_capacity(trajectories * steps),
        carry: Vec::with_capacity(trajectories),
    };
    for run in runs {
        let (evals, states, last) = run?;
        out.evaluations.extend(evals);
        out.states.extend(states);
        out.carry.push(last);
    }
    Ok(out)
}

/// One row of the iteration history.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cumulative policy evaluations used for fitting data.
    pub policy_evals: usize,
    pub cost: Option<CostEstimate>,
    /// RMS fit residual; absent for the initial row.
    pub fit_residual: Option<f64>,
    pub value: QuadraticFunction,
}

#[derive(Serialize)]
struct CsvRow {
    iteration: usize,
    policy_evals: usize,
    avg_cost: Option<f64>,
    avg_cost_stderr: Option<f64>,
    fit_residual: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationHistory {
    pub records: Vec<IterationRecord>,
}

impl IterationHistory {
    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// Most recent cost estimate.
    pub fn final_cost(&self) -> Option<CostEstimate> {
        self.records.iter().rev().find_map(|r| r.cost)
    }

    /// Columns `iteration, policy_evals, avg_cost, avg_cost_stderr, fit_residual`;
    /// missing entries are empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.records {
            wtr.serialize(CsvRow {
                iteration: r.iteration,
                policy_evals: r.policy_evals,
                avg_cost: r.cost.map(|c| c.mean),
                avg_cost_stderr: r.cost.map(|c| c.stderr),
                fit_residual: r.fit_residual,
            })?;
        }
        if self.records.is_empty() {
            wtr.write_record([
                "iteration",
                "policy_evals",
                "avg_cost",
                "avg_cost_stderr",
                "fit_residual",
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Result of an outer loop. On failure `value` is the last completed iterate
/// and `history` stops there.
#[derive(Debug)]
pub struct IterationOutcome {
    pub value: QuadraticFunction,
    pub history: IterationHistory,
    pub error: Option<Error>,
}

impl IterationOutcome {
    pub fn into_result(self) -> Result<(QuadraticFunction, IterationHistory)> {
        match self.error {
            Some(e) => Err(e),
            None => Ok((self.value, self.history)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Target {
    Gradient,
    Value,
}

/// Value-gradient iteration: fit `P x + p` to the gradients of `T V^k` at
/// the visited states, then damp.
pub fn run_vgi(
    problem: &ControlProblem,
    initial: &QuadraticFunction,
    config: &IterationConfig,
) -> IterationOutcome {
    run(problem, initial, config, Target::Gradient)
}

/// Fitted value iteration: fit a quadratic plus offset to the values of
/// `T V^k` at the visited states, then damp.
pub fn run_fvi(
    problem: &ControlProblem,
    initial: &QuadraticFunction,
    config: &IterationConfig,
) -> IterationOutcome {
    run(problem, initial, config, Target::Value)
}

fn run(
    problem: &ControlProblem,
    initial: &QuadraticFunction,
    config: &IterationConfig,
    target: Target,
) -> IterationOutcome {
    let mut outcome = IterationOutcome {
        value: initial.clone(),
        history: IterationHistory::default(),
        error: None,
    };
    let result = match config.workers {
        0 => drive(problem, config, target, &mut outcome),
        w => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(|| drive(problem, config, target, &mut outcome)),
            Err(e) => Err(Error::InvalidArgument(format!(
                "cannot start worker pool: {e}"
            ))),
        },
    };
    outcome.error = result.err();
    outcome
}

fn drive(
    problem: &ControlProblem,
    config: &IterationConfig,
    target: Target,
    out: &mut IterationOutcome,
) -> Result<()> {
    config.validate()?;
    if out.value.dim() != problem.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "initial value function dim",
            expected: problem.state_dim(),
            got: out.value.dim(),
        });
    }
    let n_per_iter = config.samples_per_iter();
    let evaluate = |k: usize, v: &QuadraticFunction| -> Result<Option<CostEstimate>> {
        let due = k == config.iterations
            || (config.eval_every > 0 && k.is_multiple_of(config.eval_every));
        if config.eval_steps == 0 || !due {
            return Ok(None);
        }
        let policy = QadpPolicy::new(problem, v)?;
        let seed = iteration_seed(config.seed, k) ^ EVAL_STREAM;
        policy::average_cost(problem, &policy, config.eval_steps, config.burn_in(), seed).map(Some)
    };
    let wrap = |iteration: usize| {
        move |e: Error| Error::Iteration {
            iteration,
            source: Box::new(e),
        }
    };

    let cost = evaluate(0, &out.value).map_err(wrap(0))?;
    out.history.records.push(IterationRecord {
        iteration: 0,
        policy_evals: 0,
        cost,
        fit_residual: None,
        value: out.value.clone(),
    });
    let mut carry: Option<Vec<DVector<f64>>> = None;
    for k in 1..=config.iterations {
        let step = || -> Result<(QuadraticFunction, f64, Vec<DVector<f64>>)> {
            let samples = collect_samples(
                problem,
                &out.value,
                config.trajectories,
                config.steps,
                carry.as_deref(),
                iteration_seed(config.seed, k),
            )?;
            let fit = match target {
                Target::Gradient => {
                    let data: Vec<_> = samples
                        .states
                        .iter()
                        .zip(&samples.evaluations)
                        .map(|(x, e)| FitSample {
                            x: x.clone(),
                            target: e.gradient.clone(),
                        })
                        .collect();
                    fitting::fit_value_gradient(&data, &config.fit)?
                }
                Target::Value => {
                    let data: Vec<_> = samples
                        .states
                        .iter()
                        .zip(&samples.evaluations)
                        .map(|(x, e)| FitSample {
                            x: x.clone(),
                            target: e.objective,
                        })
                        .collect();
                    fitting::fit_values(&data, &config.fit)?
                }
            };
            let next = fitting::damped_combine(&fit.value, &out.value, config.rho)?;
            Ok((next, fit.residual, samples.carry))
        };
        let (next, residual, last_states) = step().map_err(wrap(k))?;
        let cost = evaluate(k, &next).map_err(wrap(k))?;
        carry = Some(last_states);
        out.value = next;
        out.history.records.push(IterationRecord {
            iteration: k,
            policy_evals: k * n_per_iter,
            cost,
            fit_residual: Some(residual),
            value: out.value.clone(),
        });
    }
    Ok(())
}

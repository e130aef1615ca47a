//! The quadratic ADP policy, the Bellman operator with dual-based gradients,
//! closed-loop simulation and average-cost estimation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::conic::{self, ConicProgram, SolveSettings, SolveStatus};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, seeded_rng, Rng};
use crate::model::{ControlProblem, QuadraticFunction, StageCost};
use crate::moments::ExpectedQuadratic;

/// Number of batches used for the batch-means standard error.
pub const COST_BATCHES: usize = 20;

/// A state-feedback policy.
pub trait Policy: Sync {
    fn input(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<F> Policy for F
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    fn input(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEvalResult {
    pub input: DVector<f64>,
    /// `(T V)(x)`, including all constant terms.
    pub objective: f64,
    /// A (sub)gradient of `T V` at `x`.
    pub gradient: DVector<f64>,
    pub status: SolveStatus,
}

/// `argmin_u g(x, u) + γ E V(A x + B u + c)`.
///
/// The program for a fixed `V` is assembled once; each evaluation only pins
/// the state copy `x̃ = x`, whose multiplier gives the gradient of `T V`.
#[derive(Clone, Debug)]
pub struct QadpPolicy<'a> {
    problem: &'a ControlProblem,
    template: ConicProgram,
    settings: SolveSettings,
}

impl<'a> QadpPolicy<'a> {
    pub fn new(problem: &'a ControlProblem, v: &QuadraticFunction) -> Result<Self> {
        Self::with_settings(problem, v, SolveSettings::default())
    }

    pub fn with_settings(
        problem: &'a ControlProblem,
        v: &QuadraticFunction,
        settings: SolveSettings,
    ) -> Result<Self> {
        let n = problem.state_dim();
        let m = problem.input_dim();
        check_dim("value function dim", n, v.dim())?;
        let expected = ExpectedQuadratic::new(v, problem.moments())?;
        let gamma = problem.gamma();
        let cost = problem.cost();

        let mut prog = ConicProgram::new();
        let z0 = prog.add_variables(n + m);
        debug_assert_eq!(z0, 0);
        for i in 0..n {
            prog.add_equality(vec![(i, 1.0)], 0.0);
        }

        add_stage_cost(&mut prog, cost, 0, n, 1.0);
        let gram = expected.gram();
        let c = n + m;
        for i in 0..c {
            prog.add_quad_term(i, i, 0.5 * gamma * gram[(i, i)]);
            for j in i + 1..c {
                prog.add_quad_term(i, j, gamma * gram[(i, j)]);
            }
            prog.add_linear_term(i, gamma * (gram[(i, c)] + expected.mean_linear()[i]));
        }
        prog.add_constant(
            gamma * (0.5 * gram[(c, c)] + expected.mean_linear()[c] + expected.constant()),
        );

        Ok(Self {
            problem,
            template: prog,
            settings,
        })
    }

    pub fn problem(&self) -> &ControlProblem {
        self.problem
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> Result<PolicyEvalResult> {
        let n = self.problem.state_dim();
        let m = self.problem.input_dim();
        check_dim("state", n, x.len())?;
        if !linalg::is_finite_vec(x) {
            return Err(Error::InvalidArgument(
                "state has non-finite entries".into(),
            ));
        }
        let mut prog = self.template.clone();
        for i in 0..n {
            prog.set_equality_rhs(i, x[i]);
        }
        add_bilinear(&mut prog, self.problem.cost(), n, x, 1.0);
        let bilinear = self.problem.cost().bilinear.as_ref();
        let sol = conic::solve(&prog, &self.settings);
        match sol.status {
            SolveStatus::Infeasible => return Err(Error::infeasible_state(x)),
            SolveStatus::Unbounded => {
                return Err(Error::Solver {
                    status: sol.status,
                    context: "policy evaluation",
                })
            }
            _ => {}
        }
        if sol.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver {
                status: sol.status,
                context: "policy evaluation",
            });
        }
        let input = DVector::from_column_slice(&sol.x[n..n + m]);
        let mut gradient = -DVector::from_column_slice(&sol.eq_duals[..n]);
        // xᵀCu enters the program as a linear term in u with the state frozen,
        // so its state derivative is added back by hand.
        if let Some(c) = bilinear {
            gradient += c * &input;
        }
        Ok(PolicyEvalResult {
            input,
            objective: sol.objective,
            gradient,
            status: sol.status,
        })
    }
}

impl Policy for QadpPolicy<'_> {
    fn input(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.evaluate(x).map(|r| r.input)
    }
}

/// Adds `weight · g(x, u)` without its bilinear term for the state variables
/// starting at `x0` and input variables starting at `u0`.
pub(crate) fn add_stage_cost(
    prog: &mut ConicProgram,
    cost: &StageCost,
    x0: usize,
    u0: usize,
    weight: f64,
) {
    let n = cost.state_dim();
    let m = cost.input_dim();
    let var = |i: usize| if i < n { x0 + i } else { u0 + i - n };
    let joint = cost.joint_quadratic();
    for i in 0..n + m {
        prog.add_quad_term(var(i), var(i), weight * joint[(i, i)]);
        for j in i + 1..n + m {
            prog.add_quad_term(var(i), var(j), weight * 2.0 * joint[(i, j)]);
        }
    }
    for i in 0..n {
        prog.add_linear_term(x0 + i, weight * cost.qx[i]);
    }
    for j in 0..m {
        prog.add_linear_term(u0 + j, weight * cost.qu[j]);
    }
    prog.add_constant(weight * cost.q0);
    let remap = |coefs: &[f64]| -> Vec<(usize, f64)> {
        sparse_row(coefs.iter())
            .into_iter()
            .map(|(i, c)| (var(i), c))
            .collect()
    };
    if !cost.hinges.is_empty() {
        let t0 = prog.add_variables(cost.hinges.len());
        for (k, h) in cost.hinges.iter().enumerate() {
            let t = t0 + k;
            prog.add_linear_term(t, weight);
            prog.add_inequality(vec![(t, -1.0)], 0.0);
            let mut terms = remap(h.coef.as_slice());
            terms.push((t, -1.0));
            prog.add_inequality(terms, -h.offset);
        }
    }
    for (r, row) in cost.ineq.row_iter().enumerate() {
        let coefs: Vec<f64> = row.iter().copied().collect();
        prog.add_inequality(remap(&coefs), cost.ineq_rhs[r]);
    }
    for (r, row) in cost.eq.row_iter().enumerate() {
        let coefs: Vec<f64> = row.iter().copied().collect();
        prog.add_equality(remap(&coefs), cost.eq_rhs[r]);
    }
}

/// Adds `weight · xᵀCu` for a known state `x`, which is linear in the input.
pub(crate) fn add_bilinear(
    prog: &mut ConicProgram,
    cost: &StageCost,
    u0: usize,
    x: &DVector<f64>,
    weight: f64,
) {
    if let Some(c) = &cost.bilinear {
        let coef = c.transpose() * x;
        for (j, v) in coef.iter().enumerate() {
            prog.add_linear_term(u0 + j, weight * v);
        }
    }
}

fn sparse_row<'a>(coefs: impl Iterator<Item = &'a f64>) -> Vec<(usize, f64)> {
    coefs
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(i, c)| (i, *c))
        .collect()
}

pub fn qadp_evaluate(
    problem: &ControlProblem,
    v: &QuadraticFunction,
    x: &DVector<f64>,
) -> Result<PolicyEvalResult> {
    QadpPolicy::new(problem, v)?.evaluate(x)
}

/// `((T V)(x), ∇(T V)(x))`.
pub fn bellman_apply(
    problem: &ControlProblem,
    v: &QuadraticFunction,
    x: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let r = qadp_evaluate(problem, v, x)?;
    Ok((r.objective, r.gradient))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }
}

/// Runs `steps` closed-loop steps with inputs from `choose(t, x)`, drawing
/// dynamics from `rng`. Returns the trajectory and the state after the last step.
pub(crate) fn rollout(
    problem: &ControlProblem,
    x0: &DVector<f64>,
    steps: usize,
    rng: &mut Rng,
    mut choose: impl FnMut(usize, &DVector<f64>) -> Result<DVector<f64>>,
) -> Result<(Trajectory, DVector<f64>)> {
    check_dim("initial state", problem.state_dim(), x0.len())?;
    if !linalg::is_finite_vec(x0) {
        return Err(Error::InvalidArgument(
            "initial state has non-finite entries".into(),
        ));
    }
    let mut traj = Trajectory {
        states: Vec::with_capacity(steps),
        inputs: Vec::with_capacity(steps),
        costs: Vec::with_capacity(steps),
    };
    let mut x = x0.clone();
    let infeasible = |t: usize, x: &DVector<f64>| Error::InfeasibleStep {
        step: t,
        state: x.iter().copied().collect(),
    };
    for t in 0..steps {
        let u = match choose(t, &x) {
            Ok(u) => u,
            Err(Error::InfeasibleState { .. }) => return Err(infeasible(t, &x)),
            Err(e) => return Err(e),
        };
        let g = problem.cost().eval(&x, &u)?;
        if !g.is_finite() {
            return Err(infeasible(t, &x));
        }
        let next = problem.dynamics().sample(rng).step(&x, &u);
        traj.states.push(std::mem::replace(&mut x, next));
        traj.inputs.push(u);
        traj.costs.push(g);
    }
    Ok((traj, x))
}

/// Closed-loop trajectory of length `steps` from `x0`.
pub fn simulate(
    problem: &ControlProblem,
    policy: &dyn Policy,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = seeded_rng(seed, 0);
    rollout(problem, x0, steps, &mut rng, |_, x| policy.input(x)).map(|(t, _)| t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub steps: usize,
    pub burn_in: usize,
}

pub fn default_burn_in(steps: usize) -> usize {
    steps / 10
}

/// Mean of `costs[burn_in..]` with a batch-means standard error.
pub fn batch_means(costs: &[f64], burn_in: usize) -> CostEstimate {
    let kept = &costs[burn_in.min(costs.len())..];
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    let batches = COST_BATCHES.min(kept.len());
    let stderr = if batches < 2 {
        f64::NAN
    } else {
        let size = kept.len() / batches;
        let means: Vec<f64> = kept
            .chunks_exact(size)
            .take(batches)
            .map(|c| c.iter().sum::<f64>() / size as f64)
            .collect();
        let bm = means.iter().sum::<f64>() / batches as f64;
        let var = means.iter().map(|v| (v - bm).powi(2)).sum::<f64>() / (batches - 1) as f64;
        (var / batches as f64).sqrt()
    };
    CostEstimate {
        mean,
        stderr,
        steps: costs.len(),
        burn_in,
    }
}

/// Average stage cost from `x0` after discarding `burn_in` steps.
pub fn average_cost_from(
    problem: &ControlProblem,
    policy: &dyn Policy,
    x0: &DVector<f64>,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<CostEstimate> {
    if steps <= burn_in {
        return Err(Error::InvalidArgument(format!(
            "steps ({steps}) must exceed burn-in ({burn_in})"
        )));
    }
    let traj = simulate(problem, policy, x0, steps, seed)?;
    Ok(batch_means(&traj.costs, burn_in))
}

/// Average stage cost starting from a draw of the problem's initial-state
/// distribution (drawn from a stream separate from the dynamics).
pub fn average_cost(
    problem: &ControlProblem,
    policy: &dyn Policy,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<CostEstimate> {
    let x0 = problem
        .initial_state()
        .sample(&mut seeded_rng(seed, INITIAL_STATE_STREAM));
    average_cost_from(problem, policy, &x0, steps, burn_in, seed)
}

/// RNG stream reserved for initial-state draws.
pub(crate) const INITIAL_STATE_STREAM: u64 = u64::MAX;

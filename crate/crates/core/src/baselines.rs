//! Certainty-equivalent baselines: steady-state optimum, CE-MPC, LQR value
//! iteration on quadratics and the CE lower bound on the value function.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{self, ConicProgram, SolveSettings, SolveStatus};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, dense};
use crate::model::{ControlProblem, DynamicsMoments, QuadraticFunction, StageCost};
use crate::moments::ExpectedQuadratic;
use crate::policy::{add_bilinear, add_stage_cost, Policy};

/// Above this Frobenius norm LQR value iteration is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e8;

/// State with the exogenous coordinates at their mean next value `c̄` and
/// zeros elsewhere. Under certainty-equivalent dynamics every predicted
/// state has exactly these exogenous values.
fn exogenous_mean(problem: &ControlProblem) -> DVector<f64> {
    let c_bar = problem.moments().c_bar();
    let mut x = DVector::zeros(problem.state_dim());
    for &k in problem.exogenous_coordinates() {
        x[k] = c_bar[k];
    }
    x
}

/// Adds `z_next = Ā z + B̄ v + c̄` for variable blocks starting at the given indices.
fn add_mean_dynamics(
    prog: &mut ConicProgram,
    moments: &DynamicsMoments,
    z: usize,
    v: usize,
    z_next: usize,
) {
    let n = moments.state_dim();
    let m = moments.input_dim();
    let w = moments.mean();
    for i in 0..n {
        let mut terms = vec![(z_next + i, 1.0)];
        for j in 0..n {
            if w[(i, j)] != 0.0 {
                terms.push((z + j, -w[(i, j)]));
            }
        }
        for k in 0..m {
            if w[(i, n + k)] != 0.0 {
                terms.push((v + k, -w[(i, n + k)]));
            }
        }
        prog.add_equality(terms, w[(i, n + m)]);
    }
}

/// The certainty-equivalent steady-state optimal pair `(x_sso, u_sso)`:
/// minimize `g(z, v)` subject to `z = Ā z + B̄ v + c̄`.
pub fn ce_sso(problem: &ControlProblem) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = problem.state_dim();
    let m = problem.input_dim();
    let mut prog = ConicProgram::new();
    prog.add_variables(n + m);
    add_stage_cost(&mut prog, problem.cost(), 0, n, 1.0);
    add_bilinear(&mut prog, problem.cost(), n, &exogenous_mean(problem), 1.0);
    add_mean_dynamics(&mut prog, problem.moments(), 0, n, 0);
    let sol = conic::solve(&prog, &SolveSettings::default());
    if sol.status != SolveStatus::Optimal && sol.status != SolveStatus::Inaccurate {
        return Err(Error::Solver {
            status: sol.status,
            context: "steady-state problem",
        });
    }
    if sol.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver {
            status: sol.status,
            context: "steady-state problem",
        });
    }
    Ok((
        DVector::from_column_slice(&sol.x[..n]),
        DVector::from_column_slice(&sol.x[n..n + m]),
    ))
}

/// Weighting of the stage costs in the CE-MPC planning objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageWeighting {
    /// `Σ g(z_τ, v_τ) + V(z_{H+1})`.
    #[default]
    Sum,
    /// `(1/(H+1)) Σ g(z_τ, v_τ) + V(z_{H+1})`.
    Average,
}

/// An optimal CE plan from a given state.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcPlan {
    /// `z_1 = x, …, z_{H+1}`.
    pub states: Vec<DVector<f64>>,
    /// `v_1, …, v_H`.
    pub inputs: Vec<DVector<f64>>,
    pub objective: f64,
}

/// Certainty-equivalent MPC: plan `H` steps ahead with mean dynamics and
/// apply the first planned input.
#[derive(Clone, Debug)]
pub struct MpcPolicy<'a> {
    problem: &'a ControlProblem,
    horizon: usize,
    weight: f64,
    template: ConicProgram,
    settings: SolveSettings,
}

impl<'a> MpcPolicy<'a> {
    pub fn new(
        problem: &'a ControlProblem,
        horizon: usize,
        terminal: Option<&QuadraticFunction>,
        weighting: StageWeighting,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument(
                "MPC horizon must be at least 1".into(),
            ));
        }
        let n = problem.state_dim();
        let m = problem.input_dim();
        if let Some(v) = terminal {
            check_dim("terminal cost dim", n, v.dim())?;
        }
        let weight = match weighting {
            StageWeighting::Sum => 1.0,
            StageWeighting::Average => 1.0 / (horizon + 1) as f64,
        };
        let mut prog = ConicProgram::new();
        prog.add_variables((horizon + 1) * n + horizon * m);
        for i in 0..n {
            prog.add_equality(vec![(i, 1.0)], 0.0);
        }
        let z = |t: usize| t * n;
        let v = |t: usize| (horizon + 1) * n + t * m;
        let exo = exogenous_mean(problem);
        for t in 0..horizon {
            add_mean_dynamics(&mut prog, problem.moments(), z(t), v(t), z(t + 1));
            add_stage_cost(&mut prog, problem.cost(), z(t), v(t), weight);
            if t > 0 {
                add_bilinear(&mut prog, problem.cost(), v(t), &exo, weight);
            }
        }
        if let Some(vt) = terminal {
            let zh = z(horizon);
            let p = vt.hessian();
            for i in 0..n {
                prog.add_quad_term(zh + i, zh + i, 0.5 * p[(i, i)]);
                for j in i + 1..n {
                    prog.add_quad_term(zh + i, zh + j, p[(i, j)]);
                }
                prog.add_linear_term(zh + i, vt.linear()[i]);
            }
            prog.add_constant(vt.constant());
        }
        Ok(Self {
            problem,
            horizon,
            weight,
            template: prog,
            settings: SolveSettings::default(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn plan(&self, x: &DVector<f64>) -> Result<MpcPlan> {
        let n = self.problem.state_dim();
        let m = self.problem.input_dim();
        let h = self.horizon;
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
        add_bilinear(&mut prog, self.problem.cost(), (h + 1) * n, x, self.weight);
        let sol = conic::solve(&prog, &self.settings);
        match sol.status {
            SolveStatus::Infeasible => return Err(Error::infeasible_state(x)),
            SolveStatus::Unbounded => {
                return Err(Error::Solver {
                    status: sol.status,
                    context: "MPC plan",
                })
            }
            _ => {}
        }
        if sol.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver {
                status: sol.status,
                context: "MPC plan",
            });
        }
        let states = (0..=h)
            .map(|t| DVector::from_column_slice(&sol.x[t * n..(t + 1) * n]))
            .collect();
        let inputs = (0..h)
            .map(|t| {
                let s = (h + 1) * n + t * m;
                DVector::from_column_slice(&sol.x[s..s + m])
            })
            .collect();
        Ok(MpcPlan {
            states,
            inputs,
            objective: sol.objective,
        })
    }
}

impl Policy for MpcPolicy<'_> {
    fn input(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.plan(x)
            .map(|p| p.inputs.into_iter().next().expect("horizon ≥ 1"))
    }
}

/// First input of the `H`-step certainty-equivalent plan from `x`.
pub fn ce_mpc_evaluate(
    problem: &ControlProblem,
    horizon: usize,
    terminal: Option<&QuadraticFunction>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    MpcPolicy::new(problem, horizon, terminal, StageWeighting::Sum)?.input(x)
}

/// Affine state feedback `u = K x + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFeedback {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineFeedback {
    pub fn input(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gain * x + &self.offset
    }
}

/// Closed-form Bellman image of a quadratic under an unconstrained quadratic
/// stage cost: `min_u g(x, u) + γ E V(A x + B u + c)` as a quadratic in `x`,
/// with its minimizing feedback. The bilinear cost term, if any, enters as a
/// cross term.
pub fn quadratic_bellman_image(
    cost: &StageCost,
    moments: &DynamicsMoments,
    gamma: f64,
    v: &QuadraticFunction,
) -> Result<(QuadraticFunction, AffineFeedback)> {
    let n = moments.state_dim();
    let m = moments.input_dim();
    check_dim("stage cost state dim", n, cost.state_dim())?;
    check_dim("stage cost input dim", m, cost.input_dim())?;
    if !cost.hinges.is_empty() || cost.ineq.nrows() > 0 || cost.eq.nrows() > 0 {
        return Err(Error::InvalidArgument(
            "closed-form Bellman image needs a stage cost without constraints or hinges".into(),
        ));
    }
    let expected = ExpectedQuadratic::new(v, moments)?;
    let g = expected.gram();
    let lin = expected.mean_linear();
    let c = n + m;

    // Joint quadratic ½ zᵀ K z + kᵀ z + κ over z = (x, u).
    let mut k_mat = cost.joint_quadratic() * 2.0;
    if let Some(b) = &cost.bilinear {
        let mut xu = k_mat.view_mut((0, n), (n, m));
        xu += b;
        let mut ux = k_mat.view_mut((n, 0), (m, n));
        ux += b.transpose();
    }
    k_mat += g.view((0, 0), (c, c)) * gamma;
    let mut k_vec = DVector::zeros(c);
    k_vec.rows_mut(0, n).copy_from(&cost.qx);
    k_vec.rows_mut(n, m).copy_from(&cost.qu);
    k_vec += (g.view((0, c), (c, 1)) + lin.rows(0, c)) * gamma;
    let kappa = cost.q0 + gamma * (0.5 * g[(c, c)] + lin[c] + v.constant());

    let kuu = linalg::symmetrize(&k_mat.view((n, n), (m, m)).into_owned());
    let chol = kuu.cholesky().ok_or_else(|| {
        Error::InvalidArgument(
            "input Hessian of the Bellman objective is not positive definite".into(),
        )
    })?;
    let kux = k_mat.view((n, 0), (m, n)).into_owned();
    let ku = k_vec.rows(n, m).into_owned();
    let gain = -chol.solve(&kux);
    let offset = -chol.solve(&ku);
    let hessian = k_mat.view((0, 0), (n, n)) + kux.transpose() * &gain;
    let linear = k_vec.rows(0, n) + kux.transpose() * &offset;
    let constant = kappa + 0.5 * ku.dot(&offset);
    let value = QuadraticFunction::new(linalg::symmetrize(&hessian), linear, constant)?;
    Ok((value, AffineFeedback { gain, offset }))
}

/// Exact Bellman image `T V` for a problem whose stage cost has no
/// constraints or hinges.
pub fn unconstrained_bellman_image(
    problem: &ControlProblem,
    v: &QuadraticFunction,
) -> Result<(QuadraticFunction, AffineFeedback)> {
    quadratic_bellman_image(problem.cost(), problem.moments(), problem.gamma(), v)
}

/// Stopping rule for LQR value iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrIteration {
    pub max_iters: usize,
    /// On the max-norm change of `(P, p)` between iterates.
    pub tol: f64,
}

impl Default for LqrIteration {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            tol: 1e-10,
        }
    }
}

/// Value iteration on quadratics for deterministic dynamics
/// `x⁺ = Ā x + B̄ u + c̄`, starting from `V = 0`. Constants are dropped
/// every step, so the result is a relative value function.
pub fn lqr_value_iteration(
    a_bar: &DMatrix<f64>,
    b_bar: &DMatrix<f64>,
    c_bar: &DVector<f64>,
    cost: &StageCost,
    gamma: f64,
    stop: LqrIteration,
) -> Result<QuadraticFunction> {
    let moments = DynamicsMoments::deterministic(a_bar, b_bar, c_bar)?;
    let n = moments.state_dim();
    let mut v = QuadraticFunction::zero(n);
    let mut change = f64::INFINITY;
    for it in 0..stop.max_iters {
        let (next, _) = quadratic_bellman_image(cost, &moments, gamma, &v)?;
        let next = next.with_constant(0.0);
        let norm = next.hessian().norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::Diverged {
                iterations: it + 1,
                norm,
            });
        }
        change = (next.hessian() - v.hessian())
            .amax()
            .max((next.linear() - v.linear()).amax());
        v = next;
        if change <= stop.tol {
            return Ok(v);
        }
    }
    Err(Error::NotConverged {
        iterations: stop.max_iters,
        change,
    })
}

/// One step of turning a stage cost into a quadratic under-estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelaxationStep {
    /// Remove all polyhedral inequality and equality constraints.
    DropConstraints,
    /// Remove the hinge terms, which are nonnegative.
    DropHinges,
    /// Add `uᵀ Q u + qᵀ u + q0`, chosen nonpositive on the dropped feasible set.
    AddInputQuadratic {
        #[serde(with = "dense")]
        quu: DMatrix<f64>,
        #[serde(with = "dense::vector")]
        qu: DVector<f64>,
        q0: f64,
    },
}

/// A sequence of relaxation steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Relaxation {
    pub steps: Vec<RelaxationStep>,
}

impl Relaxation {
    pub fn drop_constraints() -> Self {
        Self {
            steps: vec![RelaxationStep::DropConstraints, RelaxationStep::DropHinges],
        }
    }

    /// Drops constraints and adds `½ Σ (uᵢ − lᵢ)(uᵢ − hᵢ)`, which is `≤ 0`
    /// on the box `l ≤ u ≤ h`.
    pub fn box_penalty(lower: &DVector<f64>, upper: &DVector<f64>) -> Self {
        let m = lower.len();
        let mut steps = Self::drop_constraints().steps;
        steps.push(RelaxationStep::AddInputQuadratic {
            quu: DMatrix::identity(m, m) * 0.5,
            qu: -(lower + upper) * 0.5,
            q0: 0.5 * lower.dot(upper),
        });
        Self { steps }
    }

    /// The relaxed stage cost.
    pub fn apply(&self, cost: &StageCost) -> Result<StageCost> {
        let n = cost.state_dim();
        let m = cost.input_dim();
        let mut out = cost.clone();
        for step in &self.steps {
            match step {
                RelaxationStep::DropConstraints => {
                    out.ineq = DMatrix::zeros(0, n + m);
                    out.ineq_rhs = DVector::zeros(0);
                    out.eq = DMatrix::zeros(0, n + m);
                    out.eq_rhs = DVector::zeros(0);
                }
                RelaxationStep::DropHinges => out.hinges.clear(),
                RelaxationStep::AddInputQuadratic { quu, qu, q0 } => {
                    check_dim("relaxation quadratic rows", m, quu.nrows())?;
                    check_dim("relaxation quadratic cols", m, quu.ncols())?;
                    check_dim("relaxation linear", m, qu.len())?;
                    out.quu += linalg::symmetrize(quu);
                    out.qu += qu;
                    out.q0 += q0;
                }
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Quadratic lower bound from the certainty-equivalent LQR problem after
/// relaxing the stage cost. A bilinear term on exogenous coordinates is
/// evaluated at their mean, so the bound does not depend on them.
pub fn ce_lqr_lower_bound(
    problem: &ControlProblem,
    relaxation: &Relaxation,
) -> Result<QuadraticFunction> {
    let mut cost = relaxation.apply(problem.cost())?;
    if !cost.hinges.is_empty() || cost.ineq.nrows() > 0 || cost.eq.nrows() > 0 {
        return Err(Error::InvalidArgument(
            "relaxation leaves constraints or hinges in the stage cost".into(),
        ));
    }
    if let Some(c) = cost.bilinear.take() {
        cost.qu += c.transpose() * exogenous_mean(problem);
    }
    let moments = problem.moments();
    lqr_value_iteration(
        &moments.a_bar(),
        &moments.b_bar(),
        &moments.c_bar(),
        &cost,
        problem.gamma(),
        LqrIteration::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_rng;
    use crate::model::{DynamicsModel, InitialState, StandardSampler, Transition};
    use crate::policy::bellman_apply;
    use rand::Rng as _;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn deterministic_problem(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DVector<f64>,
        cost: StageCost,
    ) -> ControlProblem {
        let n = a.nrows();
        let dynamics =
            DynamicsModel::standard(StandardSampler::Deterministic(Transition { a, b, c }))
                .unwrap();
        ControlProblem::new(
            dynamics,
            cost,
            1.0,
            InitialState::Fixed {
                x: DVector::zeros(n),
            },
        )
        .unwrap()
    }

    fn random_matrix(rng: &mut crate::linalg::Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
    }

    /// Random noisy system with a stable mean `A` and an unconstrained cost.
    fn random_lq(seed: u64, n: usize, m: usize) -> ControlProblem {
        let mut rng = seeded_rng(seed, 0);
        let a = random_matrix(&mut rng, n, n, 0.5);
        let b = random_matrix(&mut rng, n, m, 1.0);
        let c = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let l = random_matrix(&mut rng, n, n, 1.0);
        let cost = StageCost::quadratic(&l * l.transpose() * 0.2, DMatrix::identity(m, m))
            .with_linear(
                DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
                DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
                0.0,
            );
        let scenarios = (0..3)
            .map(|_| Transition {
                a: &a + random_matrix(&mut rng, n, n, 0.2),
                b: &b + random_matrix(&mut rng, n, m, 0.2),
                c: &c + DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5)),
            })
            .collect();
        let dynamics = DynamicsModel::standard(StandardSampler::Scenarios { scenarios }).unwrap();
        ControlProblem::new(
            dynamics,
            cost,
            1.0,
            InitialState::Fixed {
                x: DVector::zeros(n),
            },
        )
        .unwrap()
    }

    #[test]
    fn steady_state_at_origin() {
        let prob = deterministic_problem(
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::identity(2, 1),
            DVector::zeros(2),
            StageCost::quadratic(DMatrix::identity(2, 2), DMatrix::identity(1, 1)),
        );
        let (x, u) = ce_sso(&prob).unwrap();
        assert!(x.amax() < 1e-7 && u.amax() < 1e-7);
    }

    #[test]
    fn steady_state_scalar_by_hand() {
        // z = 0.5 z + v + 1 and min z² + v² gives 2.5 z = 1.
        let prob = deterministic_problem(
            scalar(0.5),
            scalar(1.0),
            dvec(&[1.0]),
            StageCost::quadratic(scalar(1.0), scalar(1.0)),
        );
        let (x, u) = ce_sso(&prob).unwrap();
        assert!((x[0] - 0.4).abs() < 1e-6, "{x}");
        assert!((u[0] + 0.8).abs() < 1e-6, "{u}");
    }

    #[test]
    fn infeasible_steady_state_is_reported() {
        // z = z + v + 1 needs v = −1, outside the box.
        let cost = StageCost::quadratic(scalar(1.0), scalar(1.0))
            .with_input_box(&dvec(&[0.0]), &dvec(&[1.0]));
        let prob = deterministic_problem(scalar(1.0), scalar(1.0), dvec(&[1.0]), cost);
        assert!(ce_sso(&prob).is_err());
    }

    #[test]
    fn scalar_riccati_fixed_point() {
        let cost = StageCost::quadratic(scalar(1.0), scalar(1.0));
        let v = lqr_value_iteration(
            &scalar(1.0),
            &scalar(1.0),
            &dvec(&[0.0]),
            &cost,
            1.0,
            LqrIteration::default(),
        )
        .unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((v.hessian()[(0, 0)] - 2.0 * phi).abs() < 1e-8);
        assert_eq!(v.constant(), 0.0);
    }

    #[test]
    fn full_actuation_without_state_cost_is_free() {
        let cost = StageCost::quadratic(DMatrix::zeros(2, 2), DMatrix::identity(2, 2));
        let v = lqr_value_iteration(
            &DMatrix::from_row_slice(2, 2, &[1.2, 0.3, -0.4, 0.9]),
            &DMatrix::identity(2, 2),
            &DVector::zeros(2),
            &cost,
            1.0,
            LqrIteration::default(),
        )
        .unwrap();
        assert!(v.hessian().amax() < 1e-12);
    }

    #[test]
    fn unstabilizable_system_diverges() {
        let cost = StageCost::quadratic(scalar(1.0), scalar(1.0));
        let err = lqr_value_iteration(
            &scalar(2.0),
            &scalar(0.0),
            &dvec(&[0.0]),
            &cost,
            1.0,
            LqrIteration::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn fixed_point_is_self_consistent() {
        for seed in 0..5 {
            let prob = random_lq(seed, 3, 2);
            let mom = prob.moments();
            let v = lqr_value_iteration(
                &mom.a_bar(),
                &mom.b_bar(),
                &mom.c_bar(),
                prob.cost(),
                1.0,
                LqrIteration::default(),
            )
            .unwrap();
            assert!(linalg::min_eigenvalue(v.hessian()) >= -1e-10);
            let det =
                DynamicsMoments::deterministic(&mom.a_bar(), &mom.b_bar(), &mom.c_bar()).unwrap();
            let (tv, _) = quadratic_bellman_image(prob.cost(), &det, 1.0, &v).unwrap();
            let mut rng = seeded_rng(seed, 9);
            let diffs: Vec<f64> = (0..20)
                .map(|_| {
                    let x = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
                    tv.value(&x).unwrap() - v.value(&x).unwrap()
                })
                .collect();
            let spread = diffs.iter().cloned().fold(f64::MIN, f64::max)
                - diffs.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread < 1e-8, "seed {seed}: spread {spread}");
        }
    }

    #[test]
    fn closed_form_image_matches_policy_program() {
        let prob = random_lq(3, 3, 2);
        let mut rng = seeded_rng(3, 4);
        let l = random_matrix(&mut rng, 3, 3, 1.0);
        let v = QuadraticFunction::new(&l * l.transpose(), dvec(&[0.3, -0.2, 0.1]), 0.7).unwrap();
        let (tv, fb) = unconstrained_bellman_image(&prob, &v).unwrap();
        for _ in 0..10 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let (value, grad) = bellman_apply(&prob, &v, &x).unwrap();
            let u = crate::policy::qadp_evaluate(&prob, &v, &x).unwrap().input;
            assert!((value - tv.value(&x).unwrap()).abs() < 1e-6 * value.abs().max(1.0));
            assert!((grad - tv.gradient(&x).unwrap()).amax() < 1e-5);
            assert!((u - fb.input(&x)).amax() < 1e-6);
        }
    }

    #[test]
    fn jensen_direction_of_ce_fixed_point() {
        for seed in 0..5 {
            let prob = random_lq(seed + 10, 3, 2);
            let mom = prob.moments();
            let v = lqr_value_iteration(
                &mom.a_bar(),
                &mom.b_bar(),
                &mom.c_bar(),
                prob.cost(),
                1.0,
                LqrIteration::default(),
            )
            .unwrap();
            let det =
                DynamicsMoments::deterministic(&mom.a_bar(), &mom.b_bar(), &mom.c_bar()).unwrap();
            let (t_ce, _) = quadratic_bellman_image(prob.cost(), &det, 1.0, &v).unwrap();
            let (t_true, _) = unconstrained_bellman_image(&prob, &v).unwrap();
            let mut rng = seeded_rng(seed, 5);
            for _ in 0..20 {
                let x = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
                assert!(t_ce.value(&x).unwrap() <= t_true.value(&x).unwrap() + 1e-4);
            }
        }
    }

    #[test]
    fn single_stage_mpc_is_greedy() {
        // argmin_u u² − 2u over |u| ≤ 0.4 is the clipped 1.
        let cost = StageCost::quadratic(scalar(1.0), scalar(1.0))
            .with_linear(dvec(&[0.0]), dvec(&[-2.0]), 0.0)
            .with_input_box(&dvec(&[-0.4]), &dvec(&[0.4]));
        let prob = deterministic_problem(scalar(0.9), scalar(1.0), dvec(&[0.0]), cost);
        let u = ce_mpc_evaluate(&prob, 1, None, &dvec(&[1.5])).unwrap();
        assert!((u[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn mpc_with_exact_terminal_cost_is_lqr() {
        let prob = random_lq(21, 3, 2);
        let mom = prob.moments();
        let v = lqr_value_iteration(
            &mom.a_bar(),
            &mom.b_bar(),
            &mom.c_bar(),
            prob.cost(),
            1.0,
            LqrIteration::default(),
        )
        .unwrap();
        let det = DynamicsMoments::deterministic(&mom.a_bar(), &mom.b_bar(), &mom.c_bar()).unwrap();
        let (_, fb) = quadratic_bellman_image(prob.cost(), &det, 1.0, &v).unwrap();
        let mut rng = seeded_rng(21, 1);
        for h in [1, 3, 7] {
            let mpc = MpcPolicy::new(&prob, h, Some(&v), StageWeighting::Sum).unwrap();
            for _ in 0..3 {
                let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
                let u = mpc.input(&x).unwrap();
                assert!((u - fb.input(&x)).amax() < 1e-6, "horizon {h}");
            }
        }
    }

    #[test]
    fn mpc_plan_is_shift_consistent() {
        let mut rng = seeded_rng(8, 0);
        let a = random_matrix(&mut rng, 3, 3, 0.7);
        let b = random_matrix(&mut rng, 3, 2, 1.0);
        let cost = StageCost::quadratic(DMatrix::identity(3, 3), DMatrix::identity(2, 2))
            .with_input_box(
                &DVector::from_element(2, -0.3),
                &DVector::from_element(2, 0.3),
            );
        let prob = deterministic_problem(a, b, dvec(&[0.2, -0.1, 0.0]), cost);
        let x = dvec(&[2.0, -1.5, 1.0]);
        let h = 6;
        let full = MpcPolicy::new(&prob, h, None, StageWeighting::Sum)
            .unwrap()
            .plan(&x)
            .unwrap();
        let tail = MpcPolicy::new(&prob, h - 1, None, StageWeighting::Sum)
            .unwrap()
            .plan(&full.states[1])
            .unwrap();
        assert!((&tail.inputs[0] - &full.inputs[1]).amax() < 1e-5);
    }

    #[test]
    fn average_weighting_keeps_argmin_without_terminal() {
        let prob = random_lq(30, 3, 2);
        let x = dvec(&[1.0, -0.5, 0.25]);
        let sum = MpcPolicy::new(&prob, 4, None, StageWeighting::Sum).unwrap();
        let avg = MpcPolicy::new(&prob, 4, None, StageWeighting::Average).unwrap();
        let (ps, pa) = (sum.plan(&x).unwrap(), avg.plan(&x).unwrap());
        assert!((&ps.inputs[0] - &pa.inputs[0]).amax() < 1e-6);
        assert!((ps.objective / 5.0 - pa.objective).abs() < 1e-6 * ps.objective.abs().max(1.0));
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let prob = random_lq(1, 2, 1);
        assert!(MpcPolicy::new(&prob, 0, None, StageWeighting::Sum).is_err());
    }

    #[test]
    fn box_penalty_underestimates_indicator_on_grid() {
        let lower = dvec(&[0.0, -1.0]);
        let upper = dvec(&[2.0, 0.5]);
        let relaxed = Relaxation::box_penalty(&lower, &upper);
        let cost = StageCost::quadratic(DMatrix::zeros(1, 1), DMatrix::zeros(2, 2))
            .with_input_box(&lower, &upper);
        let out = relaxed.apply(&cost).unwrap();
        assert_eq!(out.ineq.nrows(), 0);
        let x = dvec(&[0.0]);
        for i in 0..=20 {
            for j in 0..=20 {
                let u = dvec(&[
                    lower[0] + (upper[0] - lower[0]) * i as f64 / 20.0,
                    lower[1] + (upper[1] - lower[1]) * j as f64 / 20.0,
                ]);
                assert!(out.eval(&x, &u).unwrap() <= cost.eval(&x, &u).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn unconstrained_deterministic_bound_is_exact_lqr() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let cost = StageCost::quadratic(DMatrix::identity(2, 2), scalar(0.5));
        let prob = deterministic_problem(a.clone(), b.clone(), DVector::zeros(2), cost.clone());
        let lb = ce_lqr_lower_bound(&prob, &Relaxation::drop_constraints()).unwrap();
        let exact = lqr_value_iteration(
            &a,
            &b,
            &DVector::zeros(2),
            &cost,
            1.0,
            LqrIteration::default(),
        )
        .unwrap();
        assert!((lb.hessian() - exact.hessian()).amax() < 1e-9);
    }

    #[test]
    fn relaxation_round_trips_through_json() {
        let r = Relaxation::box_penalty(&dvec(&[0.0, 0.0]), &dvec(&[2.0, 2.0]));
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<Relaxation>(&text).unwrap(), r);
    }
}

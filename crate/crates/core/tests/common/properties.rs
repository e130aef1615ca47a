//! Property checks run by the acceptance suite through a proptest runner.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use vgi::fitting::{damped_combine, huber, FitOptions};
use vgi::iteration::{collect_samples, run_vgi, IterationConfig};
use vgi::model::QuadraticFunction;
use vgi::policy::QadpPolicy;
use vgi::problems::{make_box_lqr, make_scalar_lqr, Benchmark, BoxLqrParams, ScalarLqrParams};

/// Small box-constrained instance shared by the Bellman properties.
pub fn small_box() -> &'static Benchmark {
    static B: OnceLock<Benchmark> = OnceLock::new();
    B.get_or_init(|| {
        let params = BoxLqrParams {
            n: 3,
            m: 2,
            u_max: 0.3,
            ..BoxLqrParams::default()
        };
        make_box_lqr(&params, 7).expect("small box instance")
    })
}

fn scalar() -> &'static Benchmark {
    static B: OnceLock<Benchmark> = OnceLock::new();
    B.get_or_init(|| make_scalar_lqr(&ScalarLqrParams::default()).expect("scalar instance"))
}

pub fn state(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-3.0..3.0f64, n).prop_map(DVector::from_vec)
}

/// `½ xᵀ(LLᵀ)x + pᵀx + c` from unconstrained entries.
pub fn quadratic(n: usize) -> impl Strategy<Value = QuadraticFunction> {
    (
        prop::collection::vec(-1.0..1.0f64, n * n),
        prop::collection::vec(-1.0..1.0f64, n),
        -1.0..1.0f64,
    )
        .prop_map(move |(l, p, c)| {
            let l = DMatrix::from_vec(n, n, l);
            QuadraticFunction::new(&l * l.transpose(), DVector::from_vec(p), c).unwrap()
        })
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn bellman(x: &DVector<f64>) -> (f64, DVector<f64>) {
    let b = small_box();
    let policy = QadpPolicy::new(&b.problem, &b.initial_value).unwrap();
    let r = policy.evaluate(x).unwrap();
    (r.objective, r.gradient)
}

/// `T V` along a segment lies below the chord.
pub fn bellman_convexity(
    x: &DVector<f64>,
    y: &DVector<f64>,
    theta: f64,
) -> Result<(), TestCaseError> {
    let mid = x * theta + y * (1.0 - theta);
    let (fx, _) = bellman(x);
    let (fy, _) = bellman(y);
    let (fm, _) = bellman(&mid);
    let chord = theta * fx + (1.0 - theta) * fy;
    check(fm <= chord + 1e-6 * (1.0 + chord.abs()), || {
        format!("T V({mid}) = {fm} above chord {chord}")
    })
}

/// `T V(y) ≥ T V(x) + gᵀ(y − x)` for the returned gradient `g`.
pub fn subgradient_inequality(x: &DVector<f64>, y: &DVector<f64>) -> Result<(), TestCaseError> {
    let (fx, g) = bellman(x);
    let (fy, _) = bellman(y);
    let lin = fx + g.dot(&(y - x));
    check(fy >= lin - 1e-6 * (1.0 + fy.abs()), || {
        format!("T V(y) = {fy} below linearization {lin}")
    })
}

fn quick_config(
    iterations: usize,
    trajectories: usize,
    steps: usize,
    seed: u64,
) -> IterationConfig {
    IterationConfig {
        iterations,
        trajectories,
        steps,
        seed,
        eval_steps: 0,
        fit: FitOptions::default(),
        ..IterationConfig::default()
    }
}

/// Every stored iterate has a PSD Hessian.
pub fn iterates_psd(seed: u64) -> Result<(), TestCaseError> {
    let b = small_box();
    let (_, history) = run_vgi(&b.problem, &b.initial_value, &quick_config(3, 1, 10, seed))
        .into_result()
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    for r in &history.records {
        let min = SymmetricEigen::new(r.value.hessian().clone())
            .eigenvalues
            .min();
        check(min >= -1e-8, || {
            format!("iteration {} has eigenvalue {min}", r.iteration)
        })?;
    }
    Ok(())
}

/// Each iteration uses exactly `K·T` policy evaluations.
pub fn sample_accounting(
    trajectories: usize,
    steps: usize,
    seed: u64,
) -> Result<(), TestCaseError> {
    let b = scalar();
    let samples = collect_samples(
        &b.problem,
        &b.initial_value,
        trajectories,
        steps,
        None,
        seed,
    )
    .map_err(|e| TestCaseError::fail(e.to_string()))?;
    check(samples.evaluations.len() == trajectories * steps, || {
        format!(
            "{} evaluations for K={trajectories}, T={steps}",
            samples.evaluations.len()
        )
    })?;
    check(samples.states.len() == trajectories * steps, || {
        "state count".into()
    })?;
    check(samples.carry.len() == trajectories, || "carry count".into())?;
    let (_, history) = run_vgi(
        &b.problem,
        &b.initial_value,
        &quick_config(2, trajectories, steps, seed),
    )
    .into_result()
    .map_err(|e| TestCaseError::fail(e.to_string()))?;
    for r in &history.records {
        check(r.policy_evals == r.iteration * trajectories * steps, || {
            format!(
                "iteration {} reports {} evaluations",
                r.iteration, r.policy_evals
            )
        })?;
    }
    Ok(())
}

/// The damped update is the pointwise convex combination.
pub fn damping_linearity(
    half: &QuadraticFunction,
    prev: &QuadraticFunction,
    rho: f64,
    x: &DVector<f64>,
) -> Result<(), TestCaseError> {
    let mixed = damped_combine(half, prev, rho).unwrap();
    let lhs = mixed.value(x).unwrap();
    let rhs = rho * half.value(x).unwrap() + (1.0 - rho) * prev.value(x).unwrap();
    check((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()), || {
        format!("{lhs} != {rhs}")
    })
}

/// The Huber loss is continuous at its threshold and equals `½‖z‖²` inside.
pub fn huber_continuity(m: f64, dir: &DVector<f64>) -> Result<(), TestCaseError> {
    let unit = dir / dir.norm();
    let at = huber(&(&unit * m), m).unwrap();
    check((at - 0.5 * m * m).abs() <= 1e-12 * (1.0 + m * m), || {
        format!("boundary value {at}")
    })?;
    let eps = 1e-7 * m;
    let inside = huber(&(&unit * (m - eps)), m).unwrap();
    let outside = huber(&(&unit * (m + eps)), m).unwrap();
    check((outside - inside).abs() <= 4.0 * m * eps, || {
        format!("jump {} across the threshold", outside - inside)
    })?;
    let half = &unit * (0.5 * m);
    check(
        (huber(&half, m).unwrap() - 0.5 * half.norm_squared()).abs() <= 1e-12 * (1.0 + m * m),
        || "quadratic branch".into(),
    )
}

/// Two runs with the same seed give identical iterates and histories.
pub fn determinism(seed: u64) -> Result<(), TestCaseError> {
    let b = small_box();
    let cfg = IterationConfig {
        eval_steps: 50,
        ..quick_config(2, 2, 5, seed)
    };
    let (v1, h1) = run_vgi(&b.problem, &b.initial_value, &cfg)
        .into_result()
        .unwrap();
    let (v2, h2) = run_vgi(&b.problem, &b.initial_value, &cfg)
        .into_result()
        .unwrap();
    check(v1 == v2, || "final values differ".into())?;
    check(h1 == h2, || "histories differ".into())
}

//! Convex conic programs with a quadratic objective, solved by an
//! interior-point method (clarabel).
//!
//! A program is built incrementally: allocate variables, add objective terms,
//! then linear equalities, linear inequalities, second-order cones and PSD
//! cones whose entries are affine in the variables. Equality duals follow the
//! convention `∇f(x*) + Σ νᵢ aᵢ = 0`.

use std::sync::Once;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use openblas_src as _;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// The solver stopped without certifying optimality; the primal is its best iterate.
    Inaccurate,
}

/// `Σ coefᵢ x[idxᵢ] + constant`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn var(i: usize) -> Self {
        Self {
            terms: vec![(i, 1.0)],
            constant: 0.0,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn term(mut self, i: usize, coef: f64) -> Self {
        if coef != 0.0 {
            self.terms.push((i, coef));
        }
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

#[derive(Clone, Debug)]
struct LinearRow {
    terms: Vec<(usize, f64)>,
    rhs: f64,
}

#[derive(Clone, Debug)]
struct PsdBlock {
    dim: usize,
    /// Upper-triangular entries `(i, j)` with `i ≤ j`; absent entries are zero.
    entries: Vec<((usize, usize), AffineExpr)>,
}

/// `minimize ½ xᵀQx + qᵀx + k` over linear and conic constraints.
#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    num_vars: usize,
    /// Upper-triangular triplets of `Q`.
    quad: Vec<(usize, usize, f64)>,
    lin: Vec<f64>,
    constant: f64,
    eq: Vec<LinearRow>,
    ineq: Vec<LinearRow>,
    soc: Vec<Vec<AffineExpr>>,
    psd: Vec<PsdBlock>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates `count` variables and returns the index of the first.
    pub fn add_variables(&mut self, count: usize) -> usize {
        let start = self.num_vars;
        self.num_vars += count;
        self.lin.resize(self.num_vars, 0.0);
        start
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_equalities(&self) -> usize {
        self.eq.len()
    }

    /// Adds `coef · x[i] · x[j]` to the objective.
    pub fn add_quad_term(&mut self, i: usize, j: usize, coef: f64) {
        if coef == 0.0 {
            return;
        }
        if i == j {
            self.quad.push((i, i, 2.0 * coef));
        } else {
            self.quad.push((i.min(j), i.max(j), coef));
        }
    }

    pub fn add_linear_term(&mut self, i: usize, coef: f64) {
        self.lin[i] += coef;
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    /// `Σ terms = rhs`; returns the row index used for [`ConicSolution::eq_duals`].
    pub fn add_equality(&mut self, terms: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.eq.push(LinearRow { terms, rhs });
        self.eq.len() - 1
    }

    pub fn set_equality_rhs(&mut self, row: usize, rhs: f64) {
        self.eq[row].rhs = rhs;
    }

    /// `Σ terms ≤ rhs`.
    pub fn add_inequality(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.ineq.push(LinearRow { terms, rhs });
    }

    /// `‖(e₁, …, e_k)‖₂ ≤ e₀`.
    pub fn add_soc(&mut self, entries: Vec<AffineExpr>) {
        assert!(
            !entries.is_empty(),
            "second-order cone needs at least one entry"
        );
        self.soc.push(entries);
    }

    /// Symmetric `dim × dim` matrix with the given upper-triangular entries is PSD.
    pub fn add_psd(&mut self, dim: usize, entries: Vec<((usize, usize), AffineExpr)>) {
        let entries = entries
            .into_iter()
            .map(|((i, j), e)| ((i.min(j), i.max(j)), e))
            .collect();
        self.psd.push(PsdBlock { dim, entries });
    }

    /// Objective `½ xᵀQx + qᵀx + k` at `x`.
    pub fn objective_at(&self, x: &[f64]) -> f64 {
        let mut v = self.constant;
        for (i, c) in self.lin.iter().enumerate() {
            v += c * x[i];
        }
        for &(i, j, c) in &self.quad {
            if i == j {
                v += 0.5 * c * x[i] * x[i];
            } else {
                v += c * x[i] * x[j];
            }
        }
        v
    }

    fn validate(&self) -> bool {
        let n = self.num_vars;
        let finite = |c: f64| c.is_finite();
        let terms_ok = |terms: &[(usize, f64)]| terms.iter().all(|&(i, c)| i < n && finite(c));
        self.quad
            .iter()
            .all(|&(i, j, c)| j < n && i <= j && finite(c))
            && self.lin.iter().all(|c| finite(*c))
            && finite(self.constant)
            && self
                .eq
                .iter()
                .chain(self.ineq.iter())
                .all(|r| terms_ok(&r.terms) && finite(r.rhs))
            && self
                .soc
                .iter()
                .flatten()
                .chain(
                    self.psd
                        .iter()
                        .flat_map(|b| b.entries.iter().map(|(_, e)| e)),
                )
                .all(|e| terms_ok(&e.terms) && finite(e.constant))
            && self
                .psd
                .iter()
                .all(|b| b.entries.iter().all(|&((_, j), _)| j < b.dim))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveSettings {
    /// Absolute and relative gap / feasibility tolerance.
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

impl SolveSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// One multiplier per equality row, in insertion order.
    pub eq_duals: Vec<f64>,
    pub objective: f64,
}

static SINGLE_THREADED_BLAS: Once = Once::new();

extern "C" {
    fn openblas_set_num_threads(num_threads: std::os::raw::c_int);
}

fn ensure_single_threaded_blas() {
    SINGLE_THREADED_BLAS.call_once(|| unsafe { openblas_set_num_threads(1) });
}

struct Triplets {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
}

impl Triplets {
    fn push_row(&mut self, terms: &[(usize, f64)], sign: f64, rhs: f64) {
        let r = self.b.len();
        for &(j, c) in terms {
            if c != 0.0 {
                self.rows.push(r);
                self.cols.push(j);
                self.vals.push(sign * c);
            }
        }
        self.b.push(rhs);
    }

    /// Cone slack `s = e(x)` becomes the row `-aᵀx + s = constant`.
    fn push_affine(&mut self, e: &AffineExpr, scale: f64) {
        let scaled: Vec<(usize, f64)> = e.terms.iter().map(|&(i, c)| (i, scale * c)).collect();
        self.push_row(&scaled, -1.0, scale * e.constant);
    }
}

pub fn solve(prog: &ConicProgram, settings: &SolveSettings) -> ConicSolution {
    let n = prog.num_vars;
    let failed = |status| ConicSolution {
        status,
        x: vec![f64::NAN; n],
        eq_duals: vec![f64::NAN; prog.eq.len()],
        objective: f64::NAN,
    };
    if !prog.validate() {
        return failed(SolveStatus::Inaccurate);
    }
    ensure_single_threaded_blas();

    let mut t = Triplets {
        rows: Vec::new(),
        cols: Vec::new(),
        vals: Vec::new(),
        b: Vec::new(),
    };
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    for row in &prog.eq {
        t.push_row(&row.terms, 1.0, row.rhs);
    }
    if !prog.eq.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(prog.eq.len()));
    }
    for row in &prog.ineq {
        t.push_row(&row.terms, 1.0, row.rhs);
    }
    if !prog.ineq.is_empty() {
        cones.push(SupportedConeT::NonnegativeConeT(prog.ineq.len()));
    }
    for block in &prog.soc {
        for e in block {
            t.push_affine(e, 1.0);
        }
        cones.push(SupportedConeT::SecondOrderConeT(block.len()));
    }
    for block in &prog.psd {
        let d = block.dim;
        // Column-wise upper triangle, off-diagonals scaled by √2.
        let mut slots = vec![AffineExpr::default(); d * (d + 1) / 2];
        let slot = |i: usize, j: usize| j * (j + 1) / 2 + i;
        for ((i, j), e) in &block.entries {
            let s = &mut slots[slot(*i, *j)];
            s.terms.extend_from_slice(&e.terms);
            s.constant += e.constant;
        }
        for j in 0..d {
            for i in 0..=j {
                let scale = if i == j {
                    1.0
                } else {
                    std::f64::consts::SQRT_2
                };
                t.push_affine(&slots[slot(i, j)], scale);
            }
        }
        cones.push(SupportedConeT::PSDTriangleConeT(d));
    }

    let m = t.b.len();
    let a = CscMatrix::new_from_triplets(m, n, t.rows, t.cols, t.vals);
    let (qi, qj, qv) = prog.quad.iter().fold(
        (Vec::new(), Vec::new(), Vec::new()),
        |(mut i, mut j, mut v), &(a, b, c)| {
            i.push(a);
            j.push(b);
            v.push(c);
            (i, j, v)
        },
    );
    let p = CscMatrix::new_from_triplets(n, n, qi, qj, qv);

    let Ok(clarabel_settings) = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(settings.max_iter)
        .max_threads(1)
        .tol_gap_abs(settings.tol)
        .tol_gap_rel(settings.tol)
        .tol_feas(settings.tol)
        .tol_ktratio(settings.tol.max(1e-10).sqrt().min(1e-6))
        .build()
    else {
        return failed(SolveStatus::Inaccurate);
    };
    let Ok(mut solver) = DefaultSolver::new(&p, &prog.lin, &a, &t.b, &cones, clarabel_settings)
    else {
        return failed(SolveStatus::Inaccurate);
    };
    solver.solve();

    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::Inaccurate,
    };
    let x = sol.x.clone();
    let objective = match status {
        SolveStatus::Optimal | SolveStatus::Inaccurate => prog.objective_at(&x),
        _ => f64::NAN,
    };
    ConicSolution {
        status,
        eq_duals: sol.z[..prog.eq.len()].to_vec(),
        x,
        objective,
    }
}

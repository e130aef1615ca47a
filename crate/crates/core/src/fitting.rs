//! Convex fitting of quadratic value functions to Bellman gradients or values,
//! quadratic dominance, and damped combination of iterates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{self, AffineExpr, ConicProgram, SolveSettings, SolveStatus};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, dense};
use crate::model::{QuadraticFunction, PSD_TOL};

/// Weight on the lower-bound slack in the fitting objective. It only selects
/// the smallest valid slack and is negligible relative to the loss.
const SLACK_WEIGHT: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    /// `½ ‖z‖²`.
    Squared,
    /// Circular Huber with threshold `m`.
    Huber { m: f64 },
}

impl Default for Loss {
    fn default() -> Self {
        Loss::Huber { m: 1.0 }
    }
}

/// `½‖z‖²` for `‖z‖ ≤ m`, `m(‖z‖ − m/2)` beyond.
pub fn huber(z: &DVector<f64>, m: f64) -> Result<f64> {
    if !(m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Huber threshold must be positive, got {m}"
        )));
    }
    let r = z.norm();
    Ok(if r <= m {
        0.5 * r * r
    } else {
        m * (r - 0.5 * m)
    })
}

impl Loss {
    pub fn eval(&self, z: &DVector<f64>) -> Result<f64> {
        match *self {
            Loss::Squared => Ok(0.5 * z.norm_squared()),
            Loss::Huber { m } => huber(z, m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub loss: Loss,
    /// Weight on `‖P‖²_F + ‖p‖²`.
    pub ridge: f64,
    /// Weight on `Σᵢⱼ |Pᵢⱼ| + ‖p‖₁`.
    pub lasso: f64,
    /// Forces `p = 0`.
    pub symmetric: bool,
    /// Forces `P x* + p = 0`.
    #[serde(default, with = "dense::vector_option")]
    pub fixed_minimizer: Option<DVector<f64>>,
    /// Requires `V + s ≥ V_lb` for some scalar `s`; replaces `P ⪰ 0`.
    pub lower_bound: Option<QuadraticFunction>,
    /// State coordinates the fitted function may depend on; rows and columns
    /// of `P` and entries of `p` outside this set are zero and the matching
    /// gradient components are left out of the loss. `None` means all.
    pub coordinates: Option<Vec<usize>>,
    #[serde(skip, default = "fit_settings")]
    pub solver: SolveSettings,
}

fn fit_settings() -> SolveSettings {
    SolveSettings::with_tol(1e-8)
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            loss: Loss::default(),
            ridge: 0.0,
            lasso: 0.0,
            symmetric: false,
            fixed_minimizer: None,
            lower_bound: None,
            coordinates: None,
            solver: fit_settings(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSample<T> {
    pub x: DVector<f64>,
    pub target: T,
}

pub type GradientSample = FitSample<DVector<f64>>;
pub type ValueSample = FitSample<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    /// Fitted function; with a lower bound, its constant already includes the
    /// slack so that it dominates the bound.
    pub value: QuadraticFunction,
    pub objective: f64,
    /// Root-mean-square residual norm of the returned function on the samples.
    pub residual: f64,
    /// With a lower bound active: the constant added to the fitted quadratic
    /// part so that it dominates the bound. Gradient fits fold it into
    /// `value`; value fits keep their fitted offset and report it here.
    pub slack: Option<f64>,
    pub status: SolveStatus,
}

/// Variable layout of `(P, p)` restricted to a coordinate subset.
struct Params {
    n: usize,
    support: Vec<usize>,
    p_start: usize,
    lin_start: Option<usize>,
}

impl Params {
    fn new(prog: &mut ConicProgram, n: usize, opts: &FitOptions) -> Result<Self> {
        let support = match &opts.coordinates {
            Some(c) => {
                let mut c = c.clone();
                c.sort_unstable();
                c.dedup();
                if c.iter().any(|&i| i >= n) {
                    return Err(Error::InvalidArgument("fit coordinate out of range".into()));
                }
                c
            }
            None => (0..n).collect(),
        };
        let k = support.len();
        let p_start = prog.add_variables(k * (k + 1) / 2);
        let lin_start = (!opts.symmetric).then(|| prog.add_variables(k));
        Ok(Self {
            n,
            support,
            p_start,
            lin_start,
        })
    }

    fn k(&self) -> usize {
        self.support.len()
    }

    /// Variable holding `P[a, b]` for local indices `a`, `b`.
    fn p(&self, a: usize, b: usize) -> usize {
        let (i, j) = (a.min(b), a.max(b));
        self.p_start + j * (j + 1) / 2 + i
    }

    fn lin(&self, a: usize) -> Option<usize> {
        self.lin_start.map(|s| s + a)
    }

    fn local(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.k(), self.support.iter().map(|&i| x[i]))
    }

    /// `(P x + p)[a]`.
    fn gradient_row(&self, a: usize, xl: &DVector<f64>) -> Vec<(usize, f64)> {
        let mut terms: Vec<(usize, f64)> = (0..self.k())
            .filter(|&b| xl[b] != 0.0)
            .map(|b| (self.p(a, b), xl[b]))
            .collect();
        if let Some(v) = self.lin(a) {
            terms.push((v, 1.0));
        }
        terms
    }

    /// `½ xᵀ P x + pᵀ x`.
    fn value_row(&self, xl: &DVector<f64>) -> Vec<(usize, f64)> {
        let k = self.k();
        let mut terms = Vec::new();
        for b in 0..k {
            for a in 0..=b {
                let coef = if a == b {
                    0.5 * xl[a] * xl[a]
                } else {
                    xl[a] * xl[b]
                };
                if coef != 0.0 {
                    terms.push((self.p(a, b), coef));
                }
            }
            if let (Some(v), true) = (self.lin(b), xl[b] != 0.0) {
                terms.push((v, xl[b]));
            }
        }
        terms
    }

    fn add_regularization(&self, prog: &mut ConicProgram, opts: &FitOptions) -> Result<()> {
        if opts.ridge < 0.0 || opts.lasso < 0.0 {
            return Err(Error::InvalidArgument(
                "regularization weights must be nonnegative".into(),
            ));
        }
        let k = self.k();
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for b in 0..k {
            for a in 0..=b {
                entries.push((self.p(a, b), if a == b { 1.0 } else { 2.0 }));
            }
            if let Some(v) = self.lin(b) {
                entries.push((v, 1.0));
            }
        }
        if opts.ridge > 0.0 {
            for &(v, mult) in &entries {
                prog.add_quad_term(v, v, opts.ridge * mult);
            }
        }
        if opts.lasso > 0.0 {
            let aux = prog.add_variables(entries.len());
            for (idx, &(v, mult)) in entries.iter().enumerate() {
                let a = aux + idx;
                prog.add_linear_term(a, opts.lasso * mult);
                prog.add_inequality(vec![(v, 1.0), (a, -1.0)], 0.0);
                prog.add_inequality(vec![(v, -1.0), (a, -1.0)], 0.0);
            }
        }
        Ok(())
    }

    /// `P x* + p = 0`.
    fn add_fixed_minimizer(&self, prog: &mut ConicProgram, opts: &FitOptions) -> Result<()> {
        if let Some(xs) = &opts.fixed_minimizer {
            check_dim("fixed minimizer", self.n, xs.len())?;
            let xl = self.local(xs);
            for a in 0..self.k() {
                prog.add_equality(self.gradient_row(a, &xl), 0.0);
            }
        }
        Ok(())
    }

    /// `P ⪰ 0`, or the lower-bound LMI. Returns the slack variable in the latter case.
    fn add_cone(&self, prog: &mut ConicProgram, opts: &FitOptions) -> Result<Option<usize>> {
        let k = self.k();
        let mut entries = Vec::with_capacity(k * (k + 1) / 2 + k + 1);
        let Some(lb) = &opts.lower_bound else {
            for b in 0..k {
                for a in 0..=b {
                    entries.push(((a, b), AffineExpr::var(self.p(a, b))));
                }
            }
            prog.add_psd(k, entries);
            return Ok(None);
        };
        check_dim("lower bound dim", self.n, lb.dim())?;
        let outside = (0..self.n).filter(|i| !self.support.contains(i));
        for i in outside {
            let touches = lb.linear()[i] != 0.0 || lb.hessian().row(i).iter().any(|v| *v != 0.0);
            if touches {
                return Err(Error::InvalidArgument(
                    "lower bound depends on coordinates excluded from the fit".into(),
                ));
            }
        }
        let (hl, ll) = (lb.hessian(), lb.linear());
        for b in 0..k {
            for a in 0..=b {
                let (i, j) = (self.support[a], self.support[b]);
                entries.push(((a, b), AffineExpr::var(self.p(a, b)).plus(-hl[(i, j)])));
            }
            let lin = match self.lin(b) {
                Some(v) => AffineExpr::var(v),
                None => AffineExpr::default(),
            };
            entries.push(((b, k), lin.plus(-ll[self.support[b]])));
        }
        let s = prog.add_variables(1);
        prog.add_linear_term(s, SLACK_WEIGHT);
        entries.push(((k, k), AffineExpr::var(s)));
        prog.add_psd(k + 1, entries);
        Ok(Some(s))
    }

    fn extract(&self, x: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n;
        let mut hess = DMatrix::zeros(n, n);
        let mut lin = DVector::zeros(n);
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                hess[(i, j)] = x[self.p(a, b)];
            }
            if let Some(v) = self.lin(a) {
                lin[i] = x[v];
            }
        }
        (hess, lin)
    }
}

/// Adds `(1/N) L(e)` for the residual `e` of dimension `d` (given as affine rows).
fn add_loss(
    prog: &mut ConicProgram,
    loss: Loss,
    residual: Vec<AffineExpr>,
    weight: f64,
) -> Result<()> {
    let d = residual.len();
    match loss {
        Loss::Squared => {
            let r = prog.add_variables(d);
            for (a, e) in residual.into_iter().enumerate() {
                let mut terms = e.terms;
                terms.push((r + a, -1.0));
                prog.add_equality(terms, -e.constant);
                prog.add_quad_term(r + a, r + a, 0.5 * weight);
            }
        }
        Loss::Huber { m } => {
            if !(m > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "Huber threshold must be positive, got {m}"
                )));
            }
            // L(e) = min_w ½‖w‖² + M‖e − w‖.
            let w = prog.add_variables(d);
            let t = prog.add_variables(1);
            prog.add_linear_term(t, m * weight);
            let mut cone = vec![AffineExpr::var(t)];
            for (a, e) in residual.into_iter().enumerate() {
                prog.add_quad_term(w + a, w + a, 0.5 * weight);
                cone.push(e.term(w + a, -1.0));
            }
            prog.add_soc(cone);
        }
    }
    Ok(())
}

struct Solved {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    x: Vec<f64>,
    /// Smallest constant `c` with `½xᵀPx + pᵀx + c ≥ V_lb`, when a bound is active.
    dominating_constant: Option<f64>,
    objective: f64,
    status: SolveStatus,
}

fn finish(
    prog: &ConicProgram,
    params: &Params,
    slack_var: Option<usize>,
    opts: &FitOptions,
) -> Result<Solved> {
    let sol = conic::solve(prog, &opts.solver);
    let failed = sol.x.iter().any(|v| !v.is_finite())
        || matches!(sol.status, SolveStatus::Infeasible | SolveStatus::Unbounded);
    if failed {
        return Err(Error::Solver {
            status: sol.status,
            context: "fitting",
        });
    }
    let (mut hessian, linear) = params.extract(&sol.x);
    let dominating_constant = match (slack_var, &opts.lower_bound) {
        (Some(s), Some(lb)) => {
            // Repair solver-tolerance violations of the LMI by a tiny shift
            // of P and the slack so that dominance holds exactly.
            let mut s_val = sol.x[s];
            let gap = lmi_min_eigenvalue(&hessian, &linear, s_val, lb);
            if gap < 0.0 {
                for &i in &params.support {
                    hessian[(i, i)] -= gap;
                }
                s_val -= gap;
            }
            Some(lb.constant() + 0.5 * s_val)
        }
        _ => {
            hessian = project_support(&hessian, &params.support);
            None
        }
    };
    Ok(Solved {
        hessian,
        linear,
        x: sol.x,
        dominating_constant,
        objective: sol.objective,
        status: sol.status,
    })
}

/// PSD projection of the principal submatrix on `support`, leaving the rest zero.
fn project_support(hessian: &DMatrix<f64>, support: &[usize]) -> DMatrix<f64> {
    let k = support.len();
    let sub = DMatrix::from_fn(k, k, |a, b| hessian[(support[a], support[b])]);
    let proj = linalg::project_psd(&sub);
    let mut out = DMatrix::zeros(hessian.nrows(), hessian.ncols());
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            out[(i, j)] = proj[(a, b)];
        }
    }
    out
}

fn lmi_min_eigenvalue(
    hess: &DMatrix<f64>,
    lin: &DVector<f64>,
    s: f64,
    lb: &QuadraticFunction,
) -> f64 {
    let n = hess.nrows();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&(hess - lb.hessian()));
    let dl = lin - lb.linear();
    m.view_mut((0, n), (n, 1)).copy_from(&dl);
    m.view_mut((n, 0), (1, n)).copy_from(&dl.transpose());
    m[(n, n)] = s;
    linalg::min_eigenvalue(&m)
}

/// Fits `∇V(x) = P x + p` to gradient samples.
pub fn fit_value_gradient(samples: &[GradientSample], opts: &FitOptions) -> Result<Fit> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("gradient fit needs at least one sample".into()))?;
    let n = first.x.len();
    let mut prog = ConicProgram::new();
    let params = Params::new(&mut prog, n, opts)?;
    let weight = 1.0 / samples.len() as f64;
    for s in samples {
        check_dim("sample state", n, s.x.len())?;
        check_dim("sample gradient", n, s.target.len())?;
        if !linalg::is_finite_vec(&s.x) || !linalg::is_finite_vec(&s.target) {
            return Err(Error::InvalidArgument(
                "fit sample has non-finite entries".into(),
            ));
        }
        let xl = params.local(&s.x);
        let residual = params
            .support
            .iter()
            .enumerate()
            .map(|(a, &i)| AffineExpr {
                terms: params.gradient_row(a, &xl),
                constant: -s.target[i],
            })
            .collect();
        add_loss(&mut prog, opts.loss, residual, weight)?;
    }
    params.add_regularization(&mut prog, opts)?;
    params.add_fixed_minimizer(&mut prog, opts)?;
    let slack_var = params.add_cone(&mut prog, opts)?;
    let solved = finish(&prog, &params, slack_var, opts)?;
    let constant = solved.dominating_constant.unwrap_or(0.0);
    let value = QuadraticFunction::new(solved.hessian, solved.linear, constant)?;
    let residual = rms(samples.iter().map(|s| {
        let g = value.gradient(&s.x).expect("dimension checked");
        params
            .support
            .iter()
            .map(|&i| (g[i] - s.target[i]).powi(2))
            .sum::<f64>()
    }));
    Ok(Fit {
        value,
        objective: solved.objective,
        residual,
        slack: solved.dominating_constant,
        status: solved.status,
    })
}

/// Fits `V(x) = ½ xᵀPx + pᵀx + c` to value samples.
pub fn fit_values(samples: &[ValueSample], opts: &FitOptions) -> Result<Fit> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("value fit needs at least one sample".into()))?;
    let n = first.x.len();
    let mut prog = ConicProgram::new();
    let params = Params::new(&mut prog, n, opts)?;
    let offset = prog.add_variables(1);
    let weight = 1.0 / samples.len() as f64;
    for s in samples {
        check_dim("sample state", n, s.x.len())?;
        if !linalg::is_finite_vec(&s.x) || !s.target.is_finite() {
            return Err(Error::InvalidArgument(
                "fit sample has non-finite entries".into(),
            ));
        }
        let xl = params.local(&s.x);
        let mut terms = params.value_row(&xl);
        terms.push((offset, 1.0));
        let residual = vec![AffineExpr {
            terms,
            constant: -s.target,
        }];
        add_loss(&mut prog, opts.loss, residual, weight)?;
    }
    params.add_regularization(&mut prog, opts)?;
    params.add_fixed_minimizer(&mut prog, opts)?;
    let slack_var = params.add_cone(&mut prog, opts)?;
    let solved = finish(&prog, &params, slack_var, opts)?;
    let c = solved.x[offset];
    let value = QuadraticFunction::new(solved.hessian, solved.linear, c)?;
    let slack = solved.dominating_constant.map(|d| d - c);
    let residual = rms(samples
        .iter()
        .map(|s| (value.value(&s.x).expect("dimension checked") - s.target).powi(2)));
    Ok(Fit {
        value,
        objective: solved.objective,
        residual,
        slack,
        status: solved.status,
    })
}

fn rms(squares: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = squares.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (sum / count.max(1) as f64).sqrt()
}

/// `V₁(x) ≥ V₂(x)` for all `x`.
pub fn quadratic_dominates(v1: &QuadraticFunction, v2: &QuadraticFunction) -> Result<bool> {
    check_dim("dominance dims", v1.dim(), v2.dim())?;
    let n = v1.dim();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n))
        .copy_from(&(v1.hessian() - v2.hessian()));
    let dl = v1.linear() - v2.linear();
    m.view_mut((0, n), (n, 1)).copy_from(&dl);
    m.view_mut((n, 0), (1, n)).copy_from(&dl.transpose());
    // V₁ − V₂ = ½ (x, 1)ᵀ M (x, 1) needs the doubled constant in the corner.
    m[(n, n)] = 2.0 * (v1.constant() - v2.constant());
    Ok(linalg::min_eigenvalue(&m) >= PSD_TOL)
}

/// `ρ V_half + (1 − ρ) V_prev`.
pub fn damped_combine(
    v_half: &QuadraticFunction,
    v_prev: &QuadraticFunction,
    rho: f64,
) -> Result<QuadraticFunction> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "damping must lie in (0, 1], got {rho}"
        )));
    }
    check_dim("damping dims", v_prev.dim(), v_half.dim())?;
    if rho == 1.0 {
        return Ok(v_half.clone());
    }
    QuadraticFunction::new(
        v_half.hessian() * rho + v_prev.hessian() * (1.0 - rho),
        v_half.linear() * rho + v_prev.linear() * (1.0 - rho),
        v_half.constant() * rho + v_prev.constant() * (1.0 - rho),
    )
}

//! Core domain types: quadratic value functions, random affine dynamics,
//! convex stage costs, and the control problem that ties them together.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, dense, Rng};

/// Entries of a value-function Hessian may differ from symmetric by this much
/// before construction symmetrizes them.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Smallest eigenvalue accepted for a "PSD" matrix.
pub const PSD_TOL: f64 = -1e-8;
/// Absolute slack (scaled by `max(1, |rhs|)`) allowed on polyhedral constraints
/// when evaluating a stage cost.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Convex quadratic `V(x) = ½ xᵀ H x + hᵀ x + k` with `H ⪰ 0`.
///
/// Serialized as `{"n", "P" (row-major), "p", "pi"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuadraticJson", into = "QuadraticJson")]
pub struct QuadraticFunction {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
}

impl QuadraticFunction {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>, constant: f64) -> Result<Self> {
        let n = linear.len();
        check_dim("quadratic hessian rows", n, hessian.nrows())?;
        check_dim("quadratic hessian cols", n, hessian.ncols())?;
        if !hessian.iter().chain(linear.iter()).all(|v| v.is_finite()) || !constant.is_finite() {
            return Err(Error::InvalidArgument(
                "quadratic function has non-finite coefficients".into(),
            ));
        }
        let hessian = linalg::symmetrize(&hessian);
        let min_eig = linalg::min_eigenvalue(&hessian);
        if min_eig < PSD_TOL {
            return Err(Error::NotPsd {
                min_eigenvalue: min_eig,
            });
        }
        Ok(Self {
            hessian,
            linear,
            constant,
        })
    }

    pub fn zero(n: usize) -> Self {
        Self {
            hessian: DMatrix::zeros(n, n),
            linear: DVector::zeros(n),
            constant: 0.0,
        }
    }

    /// Purely quadratic `½ xᵀ H x`.
    pub fn from_hessian(hessian: DMatrix<f64>) -> Result<Self> {
        let n = hessian.nrows();
        Self::new(hessian, DVector::zeros(n), 0.0)
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn with_constant(mut self, constant: f64) -> Self {
        self.constant = constant;
        self
    }

    pub fn value(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("state", self.dim(), x.len())?;
        Ok(0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x) + self.constant)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.dim(), x.len())?;
        Ok(&self.hessian * x + &self.linear)
    }

    /// Number of free scalar parameters in `(H, h)`: n(n+1)/2 + n.
    pub fn parameter_count(n: usize) -> usize {
        n * (n + 1) / 2 + n
    }
}

#[derive(Serialize, Deserialize)]
struct QuadraticJson {
    n: usize,
    #[serde(rename = "P")]
    hessian: Vec<f64>,
    p: Vec<f64>,
    pi: f64,
}

impl TryFrom<QuadraticJson> for QuadraticFunction {
    type Error = Error;

    fn try_from(raw: QuadraticJson) -> Result<Self> {
        let hessian =
            dense::from_row_major(raw.n, raw.n, &raw.hessian).ok_or(Error::DimensionMismatch {
                what: "value function P entries",
                expected: raw.n * raw.n,
                got: raw.hessian.len(),
            })?;
        check_dim("value function p", raw.n, raw.p.len())?;
        QuadraticFunction::new(hessian, DVector::from_vec(raw.p), raw.pi)
    }
}

impl From<QuadraticFunction> for QuadraticJson {
    fn from(v: QuadraticFunction) -> Self {
        QuadraticJson {
            n: v.dim(),
            hessian: dense::row_major(&v.hessian),
            p: v.linear.iter().copied().collect(),
            pi: v.constant,
        }
    }
}

/// One realization of the random dynamics `x⁺ = A x + B u + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    #[serde(with = "dense")]
    pub a: DMatrix<f64>,
    #[serde(with = "dense")]
    pub b: DMatrix<f64>,
    #[serde(with = "dense::vector")]
    pub c: DVector<f64>,
}

impl Transition {
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c
    }

    /// Columns stacked as `vec([A B c])`.
    pub(crate) fn stacked(&self) -> DVector<f64> {
        let n = self.a.nrows();
        let q = self.a.ncols() + self.b.ncols() + 1;
        let mut w = DVector::zeros(n * q);
        let mut k = 0;
        for col in self.a.column_iter().chain(self.b.column_iter()) {
            w.rows_mut(k, n).copy_from(&col);
            k += n;
        }
        w.rows_mut(k, n).copy_from(&self.c);
        w
    }
}

/// First and second moments of the random matrix `W = [A B c]` (n × (n+m+1)).
///
/// Stored as the mean `W̄` and the raw second moment `E[vec(W) vec(W)ᵀ]`;
/// block `(i, j)` of the latter is `E[Wᵢ Wⱼᵀ]` for columns `i`, `j`. Accessors
/// report the centered covariance blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsMoments {
    n: usize,
    m: usize,
    mean: DMatrix<f64>,
    second: DMatrix<f64>,
}

impl DynamicsMoments {
    /// `mean` is n × (n+m+1); `second` is the raw second moment of `vec(W)`.
    pub fn from_raw(n: usize, m: usize, mean: DMatrix<f64>, second: DMatrix<f64>) -> Result<Self> {
        let q = n + m + 1;
        check_dim("moment mean rows", n, mean.nrows())?;
        check_dim("moment mean cols", q, mean.ncols())?;
        check_dim("second moment rows", n * q, second.nrows())?;
        check_dim("second moment cols", n * q, second.ncols())?;
        Ok(Self {
            n,
            m,
            mean,
            second: linalg::symmetrize(&second),
        })
    }

    /// From the mean of `W` and the covariance of `vec(W)`.
    pub fn from_covariance(
        n: usize,
        m: usize,
        mean: DMatrix<f64>,
        covariance: DMatrix<f64>,
    ) -> Result<Self> {
        let q = n + m + 1;
        check_dim("moment mean cols", q, mean.ncols())?;
        let w = DVector::from_column_slice(mean.as_slice());
        check_dim("covariance rows", n * q, covariance.nrows())?;
        let second = covariance + &w * w.transpose();
        Self::from_raw(n, m, mean, second)
    }

    pub fn deterministic(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DVector<f64>) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        Self::with_additive_noise(a, b, c, &DMatrix::zeros(n, n)).map(|mut s| {
            s.m = m;
            s
        })
    }

    /// Constant `A`, `B` and random `c` with the given mean and covariance.
    pub fn with_additive_noise(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        c_mean: &DVector<f64>,
        c_cov: &DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        check_dim("A cols", n, a.ncols())?;
        check_dim("B rows", n, b.nrows())?;
        check_dim("c length", n, c_mean.len())?;
        check_dim("c covariance", n, c_cov.nrows())?;
        let q = n + m + 1;
        let mut mean = DMatrix::zeros(n, q);
        mean.columns_mut(0, n).copy_from(a);
        mean.columns_mut(n, m).copy_from(b);
        mean.column_mut(n + m).copy_from(c_mean);
        let mut cov = DMatrix::zeros(n * q, n * q);
        cov.view_mut(((q - 1) * n, (q - 1) * n), (n, n))
            .copy_from(&linalg::symmetrize(c_cov));
        Self::from_covariance(n, m, mean, cov)
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    /// Mean of `[A B c]`.
    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.second
    }

    pub fn a_bar(&self) -> DMatrix<f64> {
        self.mean.columns(0, self.n).into_owned()
    }

    pub fn b_bar(&self) -> DMatrix<f64> {
        self.mean.columns(self.n, self.m).into_owned()
    }

    pub fn c_bar(&self) -> DVector<f64> {
        self.mean.column(self.n + self.m).into_owned()
    }

    /// Covariance between columns `i` and `j` of `W = [A B c]`.
    fn column_covariance(&self, i: usize, j: usize) -> DMatrix<f64> {
        let n = self.n;
        let raw = self.second.view((i * n, j * n), (n, n));
        raw - self.mean.column(i) * self.mean.column(j).transpose()
    }

    /// Σᴬᵢⱼ: covariance of columns i and j of A.
    pub fn cov_a(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.column_covariance(i, j)
    }

    /// Σᴮᵢⱼ.
    pub fn cov_b(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.column_covariance(self.n + i, self.n + j)
    }

    /// Σᴬᴮᵢⱼ: covariance of column i of A with column j of B.
    pub fn cov_ab(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.column_covariance(i, self.n + j)
    }

    pub fn cov_ac(&self, i: usize) -> DMatrix<f64> {
        self.column_covariance(i, self.n + self.m)
    }

    pub fn cov_bc(&self, i: usize) -> DMatrix<f64> {
        self.column_covariance(self.n + i, self.n + self.m)
    }

    pub fn cov_c(&self) -> DMatrix<f64> {
        let k = self.n + self.m;
        self.column_covariance(k, k)
    }

    /// `E[Wᵀ P W]`, the (n+m+1)² Gram matrix of the random columns under `P`.
    /// Entry `(i, j)` is `⟨P, E[Wᵢ Wⱼᵀ]⟩`.
    pub fn column_gram(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        let q = n + self.m + 1;
        let mut g = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in i..q {
                let block = self.second.view((i * n, j * n), (n, n));
                let v = block.component_mul(p).sum();
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    /// State coordinates whose next value does not depend on the current state
    /// or input: row `k` of both `A` and `B` is zero almost surely.
    pub fn exogenous_coordinates(&self) -> Vec<usize> {
        let n = self.n;
        (0..n)
            .filter(|&k| (0..n + self.m).all(|col| self.second[(col * n + k, col * n + k)] == 0.0))
            .collect()
    }
}

/// Source of IID draws of `(A, B, c)`.
pub trait DynamicsSampler: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn sample(&self, rng: &mut Rng) -> Transition;
}

/// Distributions that can be described entirely by data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StandardSampler {
    Deterministic(Transition),
    /// Constant `A`, `B`; `c ~ N(c_mean, c_cov)`.
    AdditiveGaussian {
        #[serde(with = "dense")]
        a: DMatrix<f64>,
        #[serde(with = "dense")]
        b: DMatrix<f64>,
        #[serde(with = "dense::vector")]
        c_mean: DVector<f64>,
        #[serde(with = "dense")]
        c_cov: DMatrix<f64>,
    },
    /// Uniform over a finite list of scenarios.
    Scenarios {
        scenarios: Vec<Transition>,
    },
}

impl StandardSampler {
    /// Exact moments of the described distribution.
    pub fn moments(&self) -> Result<DynamicsMoments> {
        match self {
            StandardSampler::Deterministic(t) => DynamicsMoments::deterministic(&t.a, &t.b, &t.c),
            StandardSampler::AdditiveGaussian {
                a,
                b,
                c_mean,
                c_cov,
            } => DynamicsMoments::with_additive_noise(a, b, c_mean, c_cov),
            StandardSampler::Scenarios { scenarios } => {
                let first = scenarios.first().ok_or_else(|| {
                    Error::InvalidArgument("scenario list must be nonempty".into())
                })?;
                let n = first.a.nrows();
                let m = first.b.ncols();
                let k = scenarios.len() as f64;
                let dim = n * (n + m + 1);
                let mut mean = DVector::zeros(dim);
                let mut second = DMatrix::zeros(dim, dim);
                for s in scenarios {
                    let w = s.stacked();
                    check_dim("scenario size", dim, w.len())?;
                    mean += &w / k;
                    second += &w * w.transpose() / k;
                }
                DynamicsMoments::from_raw(
                    n,
                    m,
                    DMatrix::from_column_slice(n, n + m + 1, mean.as_slice()),
                    second,
                )
            }
        }
    }
}

impl DynamicsSampler for StandardSampler {
    fn state_dim(&self) -> usize {
        match self {
            StandardSampler::Deterministic(t) => t.a.nrows(),
            StandardSampler::AdditiveGaussian { a, .. } => a.nrows(),
            StandardSampler::Scenarios { scenarios } => scenarios[0].a.nrows(),
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            StandardSampler::Deterministic(t) => t.b.ncols(),
            StandardSampler::AdditiveGaussian { b, .. } => b.ncols(),
            StandardSampler::Scenarios { scenarios } => scenarios[0].b.ncols(),
        }
    }

    fn sample(&self, rng: &mut Rng) -> Transition {
        match self {
            StandardSampler::Deterministic(t) => t.clone(),
            StandardSampler::AdditiveGaussian {
                a,
                b,
                c_mean,
                c_cov,
            } => {
                let z = DVector::from_fn(c_mean.len(), |_, _| StandardNormal.sample(rng));
                Transition {
                    a: a.clone(),
                    b: b.clone(),
                    c: c_mean + linalg::psd_sqrt(c_cov) * z,
                }
            }
            StandardSampler::Scenarios { scenarios } => {
                use rand::Rng as _;
                scenarios[rng.random_range(0..scenarios.len())].clone()
            }
        }
    }
}

/// Random dynamics: moments used by policies plus a sampler used by simulation.
#[derive(Clone, Debug)]
pub struct DynamicsModel {
    moments: DynamicsMoments,
    sampler: Arc<dyn DynamicsSampler>,
}

impl DynamicsModel {
    pub fn new(moments: DynamicsMoments, sampler: Arc<dyn DynamicsSampler>) -> Result<Self> {
        check_dim(
            "sampler state dim",
            moments.state_dim(),
            sampler.state_dim(),
        )?;
        check_dim(
            "sampler input dim",
            moments.input_dim(),
            sampler.input_dim(),
        )?;
        Ok(Self { moments, sampler })
    }

    /// Model whose moments are computed exactly from a data-described sampler.
    pub fn standard(sampler: StandardSampler) -> Result<Self> {
        let moments = sampler.moments()?;
        Self::new(moments, Arc::new(sampler))
    }

    pub fn moments(&self) -> &DynamicsMoments {
        &self.moments
    }

    pub fn sampler(&self) -> &Arc<dyn DynamicsSampler> {
        &self.sampler
    }

    pub fn sample(&self, rng: &mut Rng) -> Transition {
        self.sampler.sample(rng)
    }
}

/// `max(0, coefᵀ(x, u) + offset)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hinge {
    #[serde(with = "dense::vector")]
    pub coef: DVector<f64>,
    pub offset: f64,
}

/// Convex QP-representable stage cost
///
/// ```text
/// g(x, u) = xᵀQxx x + 2 xᵀQxu u + uᵀQuu u + xᵀC u + qxᵀx + quᵀu + q0
///           + Σ max(0, hᵢᵀ(x, u) + oᵢ)
///           + I(F (x, u) ≤ f, E (x, u) = e)
/// ```
///
/// The block `[[Qxx, Qxu], [Qxuᵀ, Quu]]` must be PSD. The optional bilinear
/// matrix `C` couples exogenous state coordinates (prices, demands) to the
/// input; the cost is then convex in `u` for every fixed `x` but not jointly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    #[serde(with = "dense")]
    pub qxx: DMatrix<f64>,
    #[serde(with = "dense")]
    pub quu: DMatrix<f64>,
    #[serde(with = "dense")]
    pub qxu: DMatrix<f64>,
    #[serde(with = "dense::vector")]
    pub qx: DVector<f64>,
    #[serde(with = "dense::vector")]
    pub qu: DVector<f64>,
    pub q0: f64,
    #[serde(
        default,
        with = "dense::option",
        skip_serializing_if = "Option::is_none"
    )]
    pub bilinear: Option<DMatrix<f64>>,
    #[serde(default)]
    pub hinges: Vec<Hinge>,
    #[serde(with = "dense")]
    pub ineq: DMatrix<f64>,
    #[serde(with = "dense::vector")]
    pub ineq_rhs: DVector<f64>,
    #[serde(with = "dense")]
    pub eq: DMatrix<f64>,
    #[serde(with = "dense::vector")]
    pub eq_rhs: DVector<f64>,
}

impl StageCost {
    /// `xᵀQx + uᵀRu` with no constraints.
    pub fn quadratic(q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        let n = q.nrows();
        let m = r.nrows();
        Self {
            qxx: q,
            quu: r,
            qxu: DMatrix::zeros(n, m),
            qx: DVector::zeros(n),
            qu: DVector::zeros(m),
            q0: 0.0,
            bilinear: None,
            hinges: Vec::new(),
            ineq: DMatrix::zeros(0, n + m),
            ineq_rhs: DVector::zeros(0),
            eq: DMatrix::zeros(0, n + m),
            eq_rhs: DVector::zeros(0),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.qxx.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.quu.nrows()
    }

    pub fn with_linear(mut self, qx: DVector<f64>, qu: DVector<f64>, q0: f64) -> Self {
        self.qx = qx;
        self.qu = qu;
        self.q0 = q0;
        self
    }

    pub fn with_cross(mut self, qxu: DMatrix<f64>) -> Self {
        self.qxu = qxu;
        self
    }

    pub fn with_bilinear(mut self, c: DMatrix<f64>) -> Self {
        self.bilinear = Some(c);
        self
    }

    pub fn with_hinge(mut self, coef: DVector<f64>, offset: f64) -> Self {
        self.hinges.push(Hinge { coef, offset });
        self
    }

    /// Appends rows `F (x, u) ≤ f`.
    pub fn with_inequalities(mut self, f: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.ineq = stack_rows(&self.ineq, &f);
        self.ineq_rhs = stack_vec(&self.ineq_rhs, &rhs);
        self
    }

    pub fn with_equalities(mut self, e: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.eq = stack_rows(&self.eq, &e);
        self.eq_rhs = stack_vec(&self.eq_rhs, &rhs);
        self
    }

    /// Elementwise `lower ≤ u ≤ upper`.
    pub fn with_input_box(self, lower: &DVector<f64>, upper: &DVector<f64>) -> Self {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut rows = DMatrix::zeros(2 * m, n + m);
        let mut rhs = DVector::zeros(2 * m);
        for i in 0..m {
            rows[(i, n + i)] = 1.0;
            rhs[i] = upper[i];
            rows[(m + i, n + i)] = -1.0;
            rhs[m + i] = -lower[i];
        }
        self.with_inequalities(rows, rhs)
    }

    /// The joint quadratic block `[[Qxx, Qxu], [Qxuᵀ, Quu]]`.
    pub fn joint_quadratic(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut h = DMatrix::zeros(n + m, n + m);
        h.view_mut((0, 0), (n, n)).copy_from(&self.qxx);
        h.view_mut((n, n), (m, m)).copy_from(&self.quu);
        h.view_mut((0, n), (n, m)).copy_from(&self.qxu);
        h.view_mut((n, 0), (m, n)).copy_from(&self.qxu.transpose());
        h
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        check_dim("Qxx cols", n, self.qxx.ncols())?;
        check_dim("Quu cols", m, self.quu.ncols())?;
        check_dim("Qxu rows", n, self.qxu.nrows())?;
        check_dim("Qxu cols", m, self.qxu.ncols())?;
        check_dim("qx", n, self.qx.len())?;
        check_dim("qu", m, self.qu.len())?;
        if let Some(c) = &self.bilinear {
            check_dim("bilinear rows", n, c.nrows())?;
            check_dim("bilinear cols", m, c.ncols())?;
        }
        for h in &self.hinges {
            check_dim("hinge coefficients", n + m, h.coef.len())?;
        }
        check_dim("inequality cols", n + m, self.ineq.ncols())?;
        check_dim("inequality rhs", self.ineq.nrows(), self.ineq_rhs.len())?;
        check_dim("equality cols", n + m, self.eq.ncols())?;
        check_dim("equality rhs", self.eq.nrows(), self.eq_rhs.len())?;
        let min_eig = linalg::min_eigenvalue(&self.joint_quadratic());
        if min_eig < PSD_TOL {
            return Err(Error::NotPsd {
                min_eigenvalue: min_eig,
            });
        }
        Ok(())
    }

    /// Stage cost at `(x, u)`; `+∞` when a polyhedral constraint is violated.
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let n = self.state_dim();
        let m = self.input_dim();
        check_dim("state", n, x.len())?;
        check_dim("input", m, u.len())?;
        let z = concat(x, u);
        let violated = |rows: &DMatrix<f64>, rhs: &DVector<f64>, eq: bool| {
            let lhs = rows * &z;
            lhs.iter().zip(rhs.iter()).any(|(l, r)| {
                let slack = FEASIBILITY_TOL * r.abs().max(1.0);
                if eq {
                    (l - r).abs() > slack
                } else {
                    l - r > slack
                }
            })
        };
        if violated(&self.ineq, &self.ineq_rhs, false) || violated(&self.eq, &self.eq_rhs, true) {
            return Ok(f64::INFINITY);
        }
        let mut g = x.dot(&(&self.qxx * x))
            + 2.0 * x.dot(&(&self.qxu * u))
            + u.dot(&(&self.quu * u))
            + self.qx.dot(x)
            + self.qu.dot(u)
            + self.q0;
        if let Some(c) = &self.bilinear {
            g += x.dot(&(c * u));
        }
        g += self
            .hinges
            .iter()
            .map(|h| (h.coef.dot(&z) + h.offset).max(0.0))
            .sum::<f64>();
        Ok(g)
    }
}

pub(crate) fn concat(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(
        top.nrows() + bottom.nrows(),
        top.ncols().max(bottom.ncols()),
    );
    out.view_mut((0, 0), top.shape()).copy_from(top);
    out.view_mut((top.nrows(), 0), bottom.shape())
        .copy_from(bottom);
    out
}

fn stack_vec(top: &DVector<f64>, bottom: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        top.len() + bottom.len(),
        top.iter().chain(bottom.iter()).copied(),
    )
}

/// Distribution of the initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    Fixed {
        #[serde(with = "dense::vector")]
        x: DVector<f64>,
    },
    Gaussian {
        #[serde(with = "dense::vector")]
        mean: DVector<f64>,
        #[serde(with = "dense")]
        cov: DMatrix<f64>,
    },
    /// Independent uniform coordinates on `[lower, upper]`.
    Uniform {
        #[serde(with = "dense::vector")]
        lower: DVector<f64>,
        #[serde(with = "dense::vector")]
        upper: DVector<f64>,
    },
    /// `exp(z)` with `z ~ N(mu, cov)`.
    LogNormal {
        #[serde(with = "dense::vector")]
        mu: DVector<f64>,
        #[serde(with = "dense")]
        cov: DMatrix<f64>,
    },
    /// Independent blocks concatenated in order.
    Stacked { parts: Vec<InitialState> },
}

impl InitialState {
    pub fn dim(&self) -> usize {
        match self {
            InitialState::Fixed { x } => x.len(),
            InitialState::Gaussian { mean, .. } => mean.len(),
            InitialState::Uniform { lower, .. } => lower.len(),
            InitialState::LogNormal { mu, .. } => mu.len(),
            InitialState::Stacked { parts } => parts.iter().map(|p| p.dim()).sum(),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        use rand::Rng as _;
        let gaussian = |rng: &mut Rng, mean: &DVector<f64>, cov: &DMatrix<f64>| {
            let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
            mean + linalg::psd_sqrt(cov) * z
        };
        match self {
            InitialState::Fixed { x } => x.clone(),
            InitialState::Gaussian { mean, cov } => gaussian(rng, mean, cov),
            InitialState::Uniform { lower, upper } => DVector::from_fn(lower.len(), |i, _| {
                lower[i] + (upper[i] - lower[i]) * rng.random::<f64>()
            }),
            InitialState::LogNormal { mu, cov } => gaussian(rng, mu, cov).map(f64::exp),
            InitialState::Stacked { parts } => {
                let blocks: Vec<DVector<f64>> = parts.iter().map(|p| p.sample(rng)).collect();
                DVector::from_iterator(
                    blocks.iter().map(|b| b.len()).sum(),
                    blocks.iter().flat_map(|b| b.iter().copied()),
                )
            }
        }
    }

    /// Expected value of the initial state.
    pub fn mean(&self) -> DVector<f64> {
        match self {
            InitialState::Fixed { x } => x.clone(),
            InitialState::Gaussian { mean, .. } => mean.clone(),
            InitialState::Uniform { lower, upper } => (lower + upper) * 0.5,
            InitialState::LogNormal { mu, cov } => {
                DVector::from_fn(mu.len(), |i, _| (mu[i] + 0.5 * cov[(i, i)]).exp())
            }
            InitialState::Stacked { parts } => {
                let blocks: Vec<DVector<f64>> = parts.iter().map(|p| p.mean()).collect();
                DVector::from_iterator(
                    blocks.iter().map(|b| b.len()).sum(),
                    blocks.iter().flat_map(|b| b.iter().copied()),
                )
            }
        }
    }
}

/// A convex stochastic control problem.
///
/// `gamma = 1` is the average-cost problem; `gamma < 1` discounts the expected
/// next-state value in the Bellman operator.
#[derive(Clone, Debug)]
pub struct ControlProblem {
    dynamics: DynamicsModel,
    cost: StageCost,
    gamma: f64,
    initial_state: InitialState,
    exogenous: Vec<usize>,
}

impl ControlProblem {
    pub fn new(
        dynamics: DynamicsModel,
        cost: StageCost,
        gamma: f64,
        initial_state: InitialState,
    ) -> Result<Self> {
        let n = dynamics.moments().state_dim();
        let m = dynamics.moments().input_dim();
        cost.validate()?;
        check_dim("stage cost state dim", n, cost.state_dim())?;
        check_dim("stage cost input dim", m, cost.input_dim())?;
        check_dim("initial state dim", n, initial_state.dim())?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount factor must lie in (0, 1], got {gamma}"
            )));
        }
        let exogenous = dynamics.moments().exogenous_coordinates();
        check_bilinear(&cost, &exogenous)?;
        Ok(Self {
            dynamics,
            cost,
            gamma,
            initial_state,
            exogenous,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.moments().state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.moments().input_dim()
    }

    pub fn dynamics(&self) -> &DynamicsModel {
        &self.dynamics
    }

    pub fn moments(&self) -> &DynamicsMoments {
        self.dynamics.moments()
    }

    pub fn cost(&self) -> &StageCost {
        &self.cost
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_state(&self) -> &InitialState {
        &self.initial_state
    }

    /// Coordinates driven purely by noise (see [`DynamicsMoments::exogenous_coordinates`]).
    pub fn exogenous_coordinates(&self) -> &[usize] {
        &self.exogenous
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount factor must lie in (0, 1], got {gamma}"
            )));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn with_moments(mut self, moments: DynamicsMoments) -> Result<Self> {
        self.dynamics = DynamicsModel::new(moments, self.dynamics.sampler.clone())?;
        self.exogenous = self.dynamics.moments().exogenous_coordinates();
        check_bilinear(&self.cost, &self.exogenous)?;
        Ok(self)
    }
}

/// The bilinear stage-cost term may only involve exogenous state coordinates.
fn check_bilinear(cost: &StageCost, exogenous: &[usize]) -> Result<()> {
    if let Some(c) = &cost.bilinear {
        for (i, row) in c.row_iter().enumerate() {
            if !exogenous.contains(&i) && row.iter().any(|v| *v != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "bilinear cost term uses state coordinate {i}, which is not exogenous"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_rng;
    use proptest::prelude::*;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn quad_eval_examples() {
        assert_eq!(
            QuadraticFunction::zero(3)
                .value(&dvec(&[1., 2., 3.]))
                .unwrap(),
            0.0
        );
        let v = QuadraticFunction::from_hessian(DMatrix::from_element(1, 1, 2.0)).unwrap();
        assert_eq!(v.value(&dvec(&[3.0])).unwrap(), 9.0);
        let v = QuadraticFunction::new(
            DMatrix::from_row_slice(2, 2, &[2., 0., 0., 4.]),
            dvec(&[1., -1.]),
            0.5,
        )
        .unwrap();
        assert!((v.value(&dvec(&[1., 1.])).unwrap() - 3.5).abs() < 1e-15);
    }

    #[test]
    fn quad_gradient_examples() {
        let x = dvec(&[0.3, -2.0]);
        assert_eq!(
            QuadraticFunction::zero(2).gradient(&x).unwrap(),
            DVector::zeros(2)
        );
        let id = QuadraticFunction::from_hessian(DMatrix::identity(2, 2)).unwrap();
        assert_eq!(id.gradient(&x).unwrap(), x);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let v = QuadraticFunction::zero(2);
        assert!(matches!(
            v.value(&dvec(&[1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(v.gradient(&dvec(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn construction_symmetrizes_and_rejects_indefinite() {
        let v = QuadraticFunction::from_hessian(DMatrix::from_row_slice(2, 2, &[1., 0.2, 0., 1.]))
            .unwrap();
        assert_eq!(v.hessian()[(0, 1)], v.hessian()[(1, 0)]);
        let bad =
            QuadraticFunction::from_hessian(DMatrix::from_row_slice(2, 2, &[1., 0., 0., -1.]));
        assert!(matches!(bad, Err(Error::NotPsd { .. })));
    }

    #[test]
    fn json_uses_row_major_layout() {
        let v = QuadraticFunction::new(
            DMatrix::from_row_slice(2, 2, &[2., 1., 1., 3.]),
            dvec(&[1., 2.]),
            0.25,
        )
        .unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(
            s,
            r#"{"n":2,"P":[2.0,1.0,1.0,3.0],"p":[1.0,2.0],"pi":0.25}"#
        );
        let back: QuadraticFunction = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(
            serde_json::from_str::<QuadraticFunction>(r#"{"n":2,"P":[1],"p":[0,0],"pi":0}"#)
                .is_err()
        );
    }

    fn box_cost() -> StageCost {
        let m = 2;
        StageCost::quadratic(DMatrix::identity(2, 2), DMatrix::identity(m, m)).with_input_box(
            &DVector::from_element(m, -0.4),
            &DVector::from_element(m, 0.4),
        )
    }

    #[test]
    fn stage_cost_examples() {
        let g = box_cost();
        g.validate().unwrap();
        assert_eq!(g.eval(&DVector::zeros(2), &DVector::zeros(2)).unwrap(), 0.0);
        assert_eq!(
            g.eval(&DVector::zeros(2), &dvec(&[0.5, 0.0])).unwrap(),
            f64::INFINITY
        );
        let hinge = StageCost::quadratic(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1))
            .with_hinge(dvec(&[1.0, 0.0]), -1.0);
        assert_eq!(hinge.eval(&dvec(&[2.0]), &dvec(&[0.0])).unwrap(), 1.0);
        assert_eq!(hinge.eval(&dvec(&[0.5]), &dvec(&[0.0])).unwrap(), 0.0);
    }

    #[test]
    fn stage_cost_rejects_nonconvex_quadratic() {
        let g = StageCost::quadratic(DMatrix::identity(1, 1), DMatrix::identity(1, 1))
            .with_cross(DMatrix::from_element(1, 1, 2.0));
        assert!(matches!(g.validate(), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn deterministic_moments_have_zero_covariance() {
        let a = DMatrix::from_row_slice(2, 2, &[1., 2., 3., 4.]);
        let b = DMatrix::from_row_slice(2, 1, &[1., 0.]);
        let c = dvec(&[0.5, -0.5]);
        let mo = DynamicsMoments::deterministic(&a, &b, &c).unwrap();
        assert_eq!(mo.a_bar(), a);
        assert_eq!(mo.b_bar(), b);
        assert_eq!(mo.c_bar(), c);
        for i in 0..2 {
            for j in 0..2 {
                assert!(mo.cov_a(i, j).iter().all(|v| *v == 0.0));
            }
            assert!(mo.cov_ac(i).iter().all(|v| *v == 0.0));
        }
        assert!(mo.cov_b(0, 0).iter().all(|v| *v == 0.0));
        assert!(mo.cov_c().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn exogenous_rows_are_detected() {
        let a = DMatrix::from_row_slice(2, 2, &[1., 0., 0., 0.]);
        let b = DMatrix::from_row_slice(2, 1, &[1., 0.]);
        let mo = DynamicsMoments::with_additive_noise(
            &a,
            &b,
            &dvec(&[0., 1.]),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert_eq!(mo.exogenous_coordinates(), vec![1]);
    }

    #[test]
    fn initial_state_stacks_blocks() {
        let s = InitialState::Stacked {
            parts: vec![
                InitialState::Uniform {
                    lower: dvec(&[0.0]),
                    upper: dvec(&[3.0]),
                },
                InitialState::Fixed {
                    x: dvec(&[7.0, 8.0]),
                },
            ],
        };
        let mut rng = seeded_rng(1, 0);
        let x = s.sample(&mut rng);
        assert_eq!(x.len(), 3);
        assert!((0.0..=3.0).contains(&x[0]));
        assert_eq!((x[1], x[2]), (7.0, 8.0));
        let json = serde_json::to_string(&s).unwrap();
        let back: InitialState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    fn random_psd(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::Rng as _;
        let mut rng = seeded_rng(seed, 0);
        let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &l * l.transpose()
    }

    proptest! {
        #[test]
        fn quad_eval_is_convex(seed in 0u64..1000, lam in 0.0f64..1.0,
                               xs in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let n = 3;
            let v = QuadraticFunction::new(random_psd(n, seed), dvec(&xs[..3]), 1.0).unwrap();
            let x = dvec(&xs[..3]);
            let y = dvec(&xs[3..]);
            let mid = &x * lam + &y * (1.0 - lam);
            let lhs = v.value(&mid).unwrap();
            let rhs = lam * v.value(&x).unwrap() + (1.0 - lam) * v.value(&y).unwrap();
            prop_assert!(lhs <= rhs + 1e-9);
        }

        #[test]
        fn quad_gradient_matches_central_differences(seed in 0u64..1000,
                                                     xs in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let n = 3;
            let v = QuadraticFunction::new(random_psd(n, seed), dvec(&[0.3, -0.2, 0.1]), 0.0).unwrap();
            let x = dvec(&xs);
            let g = v.gradient(&x).unwrap();
            let h = 1e-6;
            for i in 0..n {
                let mut e = DVector::zeros(n);
                e[i] = h;
                let fd = (v.value(&(&x + &e)).unwrap() - v.value(&(&x - &e)).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1.0));
            }
        }

        #[test]
        fn stage_cost_is_jointly_convex(lam in 0.0f64..1.0,
                                        pts in proptest::collection::vec(-0.4f64..0.4, 8)) {
            let g = box_cost().with_hinge(dvec(&[1.0, -1.0, 0.5, 0.0]), -0.1);
            let (x1, u1) = (dvec(&pts[0..2]), dvec(&pts[2..4]));
            let (x2, u2) = (dvec(&pts[4..6]), dvec(&pts[6..8]));
            let xm = &x1 * lam + &x2 * (1.0 - lam);
            let um = &u1 * lam + &u2 * (1.0 - lam);
            let lhs = g.eval(&xm, &um).unwrap();
            let rhs = lam * g.eval(&x1, &u1).unwrap() + (1.0 - lam) * g.eval(&x2, &u2).unwrap();
            prop_assert!(lhs <= rhs + 1e-9);
        }
    }
}

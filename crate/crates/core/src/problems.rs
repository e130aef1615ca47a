//! Benchmark problem generators: box-constrained LQR, commitment planning for
//! an alternative investments fund, and a multi-echelon supply chain.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{ce_lqr_lower_bound, ce_sso, Relaxation};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, dense, seeded_rng, Rng};
use crate::model::{
    ControlProblem, DynamicsModel, DynamicsSampler, InitialState, QuadraticFunction, StageCost,
    StandardSampler, Transition,
};
use crate::moments::{moments_from_samples, DEFAULT_MOMENT_SAMPLES, DEFAULT_MOMENT_SEED};

/// How the dynamics moments of a generated problem were obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MomentSource {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// A generated problem with its starting value function and quadratic lower bound.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: String,
    pub problem: ControlProblem,
    pub initial_value: QuadraticFunction,
    pub lower_bound: QuadraticFunction,
    /// State coordinates the value function should depend on; `None` for all.
    pub fit_coordinates: Option<Vec<usize>>,
    pub moments: MomentSource,
}

/// Settings for Monte-Carlo moment estimation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSettings {
    pub samples: usize,
    pub seed: u64,
}

impl Default for MomentSettings {
    fn default() -> Self {
        Self {
            samples: DEFAULT_MOMENT_SAMPLES,
            seed: DEFAULT_MOMENT_SEED,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn positive(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| *x > 0.0 && x.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("{what} must be positive")))
    }
}

fn nonnegative(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| *x >= 0.0 && x.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("{what} must be nonnegative")))
    }
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

fn monte_carlo_model(
    sampler: Arc<dyn DynamicsSampler>,
    settings: MomentSettings,
) -> Result<(DynamicsModel, MomentSource)> {
    let moments = moments_from_samples(sampler.as_ref(), settings.samples, settings.seed)?;
    Ok((
        DynamicsModel::new(moments, sampler)?,
        MomentSource::MonteCarlo {
            samples: settings.samples,
            seed: settings.seed,
        },
    ))
}

/// Scalar LQR `x⁺ = a x + b u + c`, `g = q x² + r u²`, `c ~ N(0, σ²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalarLqrParams {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub r: f64,
    pub noise_std: f64,
}

impl Default for ScalarLqrParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            q: 1.0,
            r: 1.0,
            noise_std: 0.1,
        }
    }
}

/// Unconstrained scalar LQR; the initial value function is zero.
pub fn make_scalar_lqr(params: &ScalarLqrParams) -> Result<Benchmark> {
    positive("r", &[params.r])?;
    nonnegative("q and noise_std", &[params.q, params.noise_std])?;
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let sampler = StandardSampler::AdditiveGaussian {
        a: one(params.a),
        b: one(params.b),
        c_mean: DVector::zeros(1),
        c_cov: one(params.noise_std * params.noise_std),
    };
    let cost = StageCost::quadratic(one(params.q), one(params.r));
    let problem = ControlProblem::new(
        DynamicsModel::standard(sampler)?,
        cost,
        1.0,
        InitialState::Gaussian {
            mean: DVector::zeros(1),
            cov: one(1.0),
        },
    )?;
    let lower_bound = ce_lqr_lower_bound(&problem, &Relaxation::drop_constraints())?;
    Ok(Benchmark {
        name: "scalar-lqr".into(),
        problem,
        initial_value: QuadraticFunction::zero(1),
        lower_bound,
        fit_coordinates: None,
        moments: MomentSource::Exact,
    })
}

/// Box-constrained LQR with random `A` (spectral radius 1) and `B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxLqrParams {
    pub n: usize,
    pub m: usize,
    /// `Q`; identity when absent.
    #[serde(with = "dense::option", skip_serializing_if = "Option::is_none")]
    pub q: Option<DMatrix<f64>>,
    /// `R`; identity when absent.
    #[serde(with = "dense::option", skip_serializing_if = "Option::is_none")]
    pub r: Option<DMatrix<f64>>,
    pub u_max: f64,
    /// `c ~ N(0, noise_scale · I)`.
    pub noise_scale: f64,
    /// Entries of `A` before rescaling are uniform on `[-a_range, a_range]`.
    pub a_range: f64,
    /// Entries of `B` are uniform on `[-b_range, b_range]`.
    pub b_range: f64,
    pub spectral_radius: f64,
}

impl Default for BoxLqrParams {
    fn default() -> Self {
        Self {
            n: 12,
            m: 3,
            q: None,
            r: None,
            u_max: 0.4,
            noise_scale: 0.4,
            a_range: 1.0,
            b_range: 0.5,
            spectral_radius: 1.0,
        }
    }
}

impl BoxLqrParams {
    pub fn q_matrix(&self) -> DMatrix<f64> {
        self.q
            .clone()
            .unwrap_or_else(|| DMatrix::identity(self.n, self.n))
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        self.r
            .clone()
            .unwrap_or_else(|| DMatrix::identity(self.m, self.m))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(invalid("box LQR dimensions must be positive"));
        }
        let q = self.q_matrix();
        let r = self.r_matrix();
        check_dim("Q rows", self.n, q.nrows())?;
        check_dim("Q cols", self.n, q.ncols())?;
        check_dim("R rows", self.m, r.nrows())?;
        check_dim("R cols", self.m, r.ncols())?;
        if linalg::min_eigenvalue(&q) < crate::model::PSD_TOL {
            return Err(invalid("Q must be positive semidefinite"));
        }
        if linalg::min_eigenvalue(&r) <= 0.0 {
            return Err(invalid("R must be positive definite"));
        }
        positive(
            "u_max, a_range, spectral_radius",
            &[self.u_max, self.a_range, self.spectral_radius],
        )?;
        nonnegative("noise_scale and b_range", &[self.noise_scale, self.b_range])
    }
}

/// Box LQR instance. The initial value function is `xᵀQx`.
pub fn make_box_lqr(params: &BoxLqrParams, seed: u64) -> Result<Benchmark> {
    params.validate()?;
    let (n, m) = (params.n, params.m);
    let mut rng = seeded_rng(seed, 0);
    let mut a = DMatrix::from_fn(n, n, |_, _| {
        rng.random_range(-params.a_range..=params.a_range)
    });
    let radius = spectral_radius(&a);
    if radius > 0.0 {
        a *= params.spectral_radius / radius;
    }
    let b = DMatrix::from_fn(n, m, |_, _| {
        rng.random_range(-params.b_range..=params.b_range)
    });
    let sampler = StandardSampler::AdditiveGaussian {
        a,
        b,
        c_mean: DVector::zeros(n),
        c_cov: DMatrix::identity(n, n) * params.noise_scale,
    };
    let q = params.q_matrix();
    let u_max = DVector::from_element(m, params.u_max);
    let cost = StageCost::quadratic(q.clone(), params.r_matrix()).with_input_box(&-&u_max, &u_max);
    let problem = ControlProblem::new(
        DynamicsModel::standard(sampler)?,
        cost,
        1.0,
        InitialState::Gaussian {
            mean: DVector::zeros(n),
            cov: DMatrix::identity(n, n),
        },
    )?;
    let lower_bound = ce_lqr_lower_bound(&problem, &Relaxation::drop_constraints())?;
    Ok(Benchmark {
        name: "box-lqr".into(),
        problem,
        initial_value: QuadraticFunction::from_hessian(q * 2.0)?,
        lower_bound,
        fit_coordinates: None,
        moments: MomentSource::Exact,
    })
}

/// Commitment planning for alternative investments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommitmentsParams {
    /// Mean per-period total return of each asset class.
    pub return_mean: Vec<f64>,
    pub return_std: Vec<f64>,
    /// Correlation, applied to the underlying Gaussian of the log-returns.
    #[serde(with = "dense")]
    pub correlation: DMatrix<f64>,
    pub alpha_call: Vec<f64>,
    pub beta_call: Vec<f64>,
    pub alpha_dist: Vec<f64>,
    pub beta_dist: Vec<f64>,
    /// Target NAVs; drawn uniformly from `target_range` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_target: Option<Vec<f64>>,
    pub target_range: (f64, f64),
    pub u_max: f64,
    pub lambda: f64,
    pub moments: MomentSettings,
}

impl Default for CommitmentsParams {
    fn default() -> Self {
        #[rustfmt::skip]
        let corr = DMatrix::from_row_slice(6, 6, &[
            1.0, -0.06, -0.05, 0.62, -0.32, -0.44,
            -0.06, 1.0, -0.21, 0.18, 0.80, -0.12,
            -0.05, -0.21, 1.0, 0.35, -0.27, -0.19,
            0.62, 0.18, 0.35, 1.0, 0.18, -0.15,
            -0.32, 0.80, -0.27, 0.18, 1.0, 0.37,
            -0.44, -0.12, -0.19, -0.15, 0.37, 1.0,
        ]);
        Self {
            return_mean: vec![1.0, 1.1, 1.1, 1.0, 1.1, 1.1],
            return_std: vec![0.1, 0.2, 0.2, 0.1, 0.2, 0.1],
            correlation: corr,
            alpha_call: vec![2.0; 6],
            beta_call: vec![10.3, 10.0, 12.9, 10.5, 11.8, 10.5],
            alpha_dist: vec![3.0; 6],
            beta_dist: vec![13.0, 12.7, 15.9, 12.8, 13.2, 14.2],
            n_target: None,
            target_range: (4.0, 5.0),
            u_max: 3.0,
            lambda: 0.01,
            moments: MomentSettings::default(),
        }
    }
}

impl CommitmentsParams {
    pub fn classes(&self) -> usize {
        self.return_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.classes();
        if m == 0 {
            return Err(invalid("need at least one asset class"));
        }
        for (what, v) in [
            ("return_std", &self.return_std),
            ("alpha_call", &self.alpha_call),
            ("beta_call", &self.beta_call),
            ("alpha_dist", &self.alpha_dist),
            ("beta_dist", &self.beta_dist),
        ] {
            if v.len() != m {
                return Err(invalid(format!(
                    "{what} must have length {m}, got {}",
                    v.len()
                )));
            }
        }
        positive("return_mean", &self.return_mean)?;
        nonnegative("return_std", &self.return_std)?;
        positive("Beta parameters", &self.alpha_call)?;
        positive("Beta parameters", &self.beta_call)?;
        positive("Beta parameters", &self.alpha_dist)?;
        positive("Beta parameters", &self.beta_dist)?;
        check_dim("correlation rows", m, self.correlation.nrows())?;
        check_dim("correlation cols", m, self.correlation.ncols())?;
        if (0..m).any(|i| (self.correlation[(i, i)] - 1.0).abs() > 1e-12) {
            return Err(invalid("correlation matrix must have unit diagonal"));
        }
        if linalg::min_eigenvalue(&self.correlation) < crate::model::PSD_TOL {
            return Err(invalid("correlation matrix must be positive semidefinite"));
        }
        if let Some(t) = &self.n_target {
            check_dim("n_target", m, t.len())?;
            nonnegative("n_target", t)?;
        }
        let (lo, hi) = self.target_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(invalid("target_range must satisfy 0 ≤ lo ≤ hi"));
        }
        positive("u_max", &[self.u_max])?;
        nonnegative("lambda", &[self.lambda])?;
        Ok(())
    }

    /// `(μ, Σ)` of the log-returns reproducing the stated return means and
    /// standard deviations.
    pub fn log_return_params(&self) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.classes();
        let var = DVector::from_fn(m, |i, _| {
            let cv = self.return_std[i] / self.return_mean[i];
            (1.0 + cv * cv).ln()
        });
        let mu = DVector::from_fn(m, |i, _| self.return_mean[i].ln() - 0.5 * var[i]);
        let sd = var.map(f64::sqrt);
        let cov = DMatrix::from_fn(m, m, |i, j| self.correlation[(i, j)] * sd[i] * sd[j]);
        (mu, cov)
    }
}

/// Random NAV/uncalled-commitment dynamics driven by log-normal returns and
/// Beta call and distribution intensities.
#[derive(Clone, Debug)]
pub struct CommitmentsSampler {
    log_mu: DVector<f64>,
    log_sqrt: DMatrix<f64>,
    call: Vec<Beta<f64>>,
    dist: Vec<Beta<f64>>,
}

impl CommitmentsSampler {
    pub fn new(params: &CommitmentsParams) -> Result<Self> {
        params.validate()?;
        let (log_mu, cov) = params.log_return_params();
        let beta = |a: &[f64], b: &[f64]| -> Result<Vec<Beta<f64>>> {
            a.iter()
                .zip(b)
                .map(|(&a, &b)| Beta::new(a, b).map_err(|e| invalid(e.to_string())))
                .collect()
        };
        Ok(Self {
            log_mu,
            log_sqrt: linalg::psd_sqrt(&cov),
            call: beta(&params.alpha_call, &params.beta_call)?,
            dist: beta(&params.alpha_dist, &params.beta_dist)?,
        })
    }

    fn classes(&self) -> usize {
        self.log_mu.len()
    }

    /// One draw of the returns.
    pub fn sample_returns(&self, rng: &mut Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.classes(), |_, _| StandardNormal.sample(rng));
        (&self.log_mu + &self.log_sqrt * z).map(f64::exp)
    }
}

impl DynamicsSampler for CommitmentsSampler {
    fn state_dim(&self) -> usize {
        2 * self.classes()
    }

    fn input_dim(&self) -> usize {
        self.classes()
    }

    fn sample(&self, rng: &mut Rng) -> Transition {
        let m = self.classes();
        let r = self.sample_returns(rng);
        let mut a = DMatrix::zeros(2 * m, 2 * m);
        for i in 0..m {
            let call = self.call[i].sample(rng);
            let dist = self.dist[i].sample(rng);
            a[(i, i)] = r[i] * (1.0 - dist);
            a[(i, m + i)] = call;
            a[(m + i, m + i)] = 1.0 - call;
        }
        let mut b = DMatrix::zeros(2 * m, m);
        b.view_mut((m, 0), (m, m)).fill_with_identity();
        Transition {
            a,
            b,
            c: DVector::zeros(2 * m),
        }
    }
}

/// `‖n − n_tar‖² + λ ‖u − u_ss‖²` with `0 ≤ u ≤ u_max`.
fn commitments_cost(
    n_target: &DVector<f64>,
    u_ss: &DVector<f64>,
    lambda: f64,
    u_max: f64,
) -> StageCost {
    let m = n_target.len();
    let mut qxx = DMatrix::zeros(2 * m, 2 * m);
    qxx.view_mut((0, 0), (m, m)).fill_with_identity();
    let mut qx = DVector::zeros(2 * m);
    qx.rows_mut(0, m).copy_from(&(n_target * -2.0));
    StageCost::quadratic(qxx, DMatrix::identity(m, m) * lambda)
        .with_linear(
            qx,
            u_ss * (-2.0 * lambda),
            n_target.norm_squared() + lambda * u_ss.norm_squared(),
        )
        .with_input_box(&DVector::zeros(m), &DVector::from_element(m, u_max))
}

/// Commitments instance. `u_ss` is the certainty-equivalent steady-state
/// input of the problem without the input penalty; the initial value
/// function is the CE-LQR lower bound.
pub fn make_commitments(params: &CommitmentsParams, seed: u64) -> Result<Benchmark> {
    let sampler = Arc::new(CommitmentsSampler::new(params)?);
    let m = params.classes();
    let n_target = match &params.n_target {
        Some(t) => DVector::from_column_slice(t),
        None => {
            let mut rng = seeded_rng(seed, 1);
            let (lo, hi) = params.target_range;
            DVector::from_fn(m, |_, _| lo + (hi - lo) * rng.random::<f64>())
        }
    };
    let (dynamics, source) = monte_carlo_model(sampler, params.moments)?;
    let mut initial = DVector::zeros(2 * m);
    initial.rows_mut(0, m).copy_from(&n_target);
    let initial_state = InitialState::Fixed { x: initial };

    let unpenalized = ControlProblem::new(
        dynamics.clone(),
        commitments_cost(&n_target, &DVector::zeros(m), 0.0, params.u_max),
        1.0,
        initial_state.clone(),
    )?;
    let (_, u_ss) = ce_sso(&unpenalized)?;
    let u_ss = u_ss.map(|v| v.clamp(0.0, params.u_max));

    let problem = ControlProblem::new(
        dynamics,
        commitments_cost(&n_target, &u_ss, params.lambda, params.u_max),
        1.0,
        initial_state,
    )?;
    let lower_bound = ce_lqr_lower_bound(&problem, &Relaxation::drop_constraints())?;
    Ok(Benchmark {
        name: "commitments".into(),
        problem,
        initial_value: lower_bound.clone(),
        lower_bound,
        fit_coordinates: None,
        moments: source,
    })
}

/// Single-good multi-echelon supply chain.
///
/// Inputs are ordered `(b, s, z)`: purchases on supplier links, sales on
/// consumer links and shipments on internal links. State is `(h, p, d)`:
/// stock per warehouse, supplier prices and consumer demands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupplyChainParams {
    pub warehouses: usize,
    /// Warehouse fed by each supplier link.
    pub supplier_links: Vec<usize>,
    /// Warehouse drained by each consumer link.
    pub consumer_links: Vec<usize>,
    /// `(from, to)` warehouse pairs.
    pub internal_links: Vec<(usize, usize)>,
    pub price_mu: Vec<f64>,
    #[serde(with = "dense")]
    pub price_cov: DMatrix<f64>,
    pub demand_mu: Vec<f64>,
    #[serde(with = "dense")]
    pub demand_cov: DMatrix<f64>,
    /// Linear holding cost per warehouse.
    pub alpha: Vec<f64>,
    /// Quadratic holding cost per warehouse.
    pub beta: Vec<f64>,
    /// Transport cost per internal link.
    pub tau: Vec<f64>,
    /// Retail price per consumer link.
    pub retail: Vec<f64>,
    pub h_max: Vec<f64>,
    /// Capacity per link in input order.
    pub u_max: Vec<f64>,
    pub moments: MomentSettings,
}

impl Default for SupplyChainParams {
    fn default() -> Self {
        Self {
            warehouses: 4,
            supplier_links: vec![0, 1],
            consumer_links: vec![2, 3],
            internal_links: vec![(0, 2), (1, 3), (0, 3), (3, 2)],
            price_mu: vec![0.0, 0.1],
            price_cov: DMatrix::identity(2, 2) * 0.4,
            demand_mu: vec![0.0, 0.4],
            demand_cov: DMatrix::identity(2, 2) * 0.4,
            alpha: vec![0.01; 4],
            beta: vec![0.01; 4],
            tau: vec![0.05; 4],
            retail: vec![1.3; 2],
            h_max: vec![3.0; 4],
            u_max: vec![2.0; 8],
            moments: MomentSettings::default(),
        }
    }
}

impl SupplyChainParams {
    pub fn suppliers(&self) -> usize {
        self.supplier_links.len()
    }

    pub fn consumers(&self) -> usize {
        self.consumer_links.len()
    }

    pub fn links(&self) -> usize {
        self.suppliers() + self.consumers() + self.internal_links.len()
    }

    pub fn state_dim(&self) -> usize {
        self.warehouses + self.suppliers() + self.consumers()
    }

    /// `(A_in, A_out)`: entry `(i, j)` is 1 if link `j` enters (exits) warehouse `i`.
    pub fn incidence(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let w = self.warehouses;
        let m = self.links();
        let (ns, nc) = (self.suppliers(), self.consumers());
        let mut a_in = DMatrix::zeros(w, m);
        let mut a_out = DMatrix::zeros(w, m);
        for (j, &to) in self.supplier_links.iter().enumerate() {
            a_in[(to, j)] = 1.0;
        }
        for (j, &from) in self.consumer_links.iter().enumerate() {
            a_out[(from, ns + j)] = 1.0;
        }
        for (j, &(from, to)) in self.internal_links.iter().enumerate() {
            a_out[(from, ns + nc + j)] = 1.0;
            a_in[(to, ns + nc + j)] = 1.0;
        }
        (a_in, a_out)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.warehouses;
        if w == 0 {
            return Err(invalid("need at least one warehouse"));
        }
        let endpoints = self
            .supplier_links
            .iter()
            .chain(&self.consumer_links)
            .chain(self.internal_links.iter().flat_map(|(a, b)| [a, b]));
        if endpoints.into_iter().any(|&k| k >= w) {
            return Err(invalid("link endpoint refers to a missing warehouse"));
        }
        if self.internal_links.iter().any(|(a, b)| a == b) {
            return Err(invalid("internal link must join two distinct warehouses"));
        }
        let (ns, nc) = (self.suppliers(), self.consumers());
        check_dim("price_mu", ns, self.price_mu.len())?;
        check_dim("price_cov", ns, self.price_cov.nrows())?;
        check_dim("demand_mu", nc, self.demand_mu.len())?;
        check_dim("demand_cov", nc, self.demand_cov.nrows())?;
        check_dim("alpha", w, self.alpha.len())?;
        check_dim("beta", w, self.beta.len())?;
        check_dim("tau", self.internal_links.len(), self.tau.len())?;
        check_dim("retail", nc, self.retail.len())?;
        check_dim("h_max", w, self.h_max.len())?;
        check_dim("u_max", self.links(), self.u_max.len())?;
        for cov in [&self.price_cov, &self.demand_cov] {
            if cov.nrows() != cov.ncols() || linalg::min_eigenvalue(cov) < crate::model::PSD_TOL {
                return Err(invalid("price and demand covariances must be PSD"));
            }
        }
        nonnegative("alpha", &self.alpha)?;
        nonnegative("beta", &self.beta)?;
        nonnegative("tau", &self.tau)?;
        positive("retail", &self.retail)?;
        positive("h_max", &self.h_max)?;
        positive("u_max", &self.u_max)
    }
}

/// Constant stock dynamics with fresh log-normal prices and demands.
#[derive(Clone, Debug)]
pub struct SupplyChainSampler {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    warehouses: usize,
    price_mu: DVector<f64>,
    price_sqrt: DMatrix<f64>,
    demand_mu: DVector<f64>,
    demand_sqrt: DMatrix<f64>,
}

impl SupplyChainSampler {
    pub fn new(params: &SupplyChainParams) -> Result<Self> {
        params.validate()?;
        let n = params.state_dim();
        let w = params.warehouses;
        let (a_in, a_out) = params.incidence();
        let mut a = DMatrix::zeros(n, n);
        a.view_mut((0, 0), (w, w)).fill_with_identity();
        let mut b = DMatrix::zeros(n, params.links());
        b.view_mut((0, 0), (w, params.links()))
            .copy_from(&(a_in - a_out));
        Ok(Self {
            a,
            b,
            warehouses: w,
            price_mu: DVector::from_column_slice(&params.price_mu),
            price_sqrt: linalg::psd_sqrt(&params.price_cov),
            demand_mu: DVector::from_column_slice(&params.demand_mu),
            demand_sqrt: linalg::psd_sqrt(&params.demand_cov),
        })
    }
}

impl DynamicsSampler for SupplyChainSampler {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn sample(&self, rng: &mut Rng) -> Transition {
        let mut lognormal = |mu: &DVector<f64>, sqrt: &DMatrix<f64>| {
            let z = DVector::from_fn(mu.len(), |_, _| StandardNormal.sample(&mut *rng));
            (mu + sqrt * z).map(f64::exp)
        };
        let p = lognormal(&self.price_mu, &self.price_sqrt);
        let d = lognormal(&self.demand_mu, &self.demand_sqrt);
        let mut c = DVector::zeros(self.a.nrows());
        c.rows_mut(self.warehouses, p.len()).copy_from(&p);
        c.rows_mut(self.warehouses + p.len(), d.len()).copy_from(&d);
        Transition {
            a: self.a.clone(),
            b: self.b.clone(),
            c,
        }
    }
}

/// `−rᵀs + pᵀb + τᵀz + αᵀh + Σ βᵢ hᵢ²` with stock, capacity, outflow and
/// demand constraints.
pub fn supply_chain_cost(params: &SupplyChainParams) -> Result<StageCost> {
    params.validate()?;
    let w = params.warehouses;
    let (ns, nc) = (params.suppliers(), params.consumers());
    let n = params.state_dim();
    let m = params.links();
    let (a_in, a_out) = params.incidence();
    let flow = &a_in - &a_out;

    let mut qxx = DMatrix::zeros(n, n);
    for i in 0..w {
        qxx[(i, i)] = params.beta[i];
    }
    let mut qx = DVector::zeros(n);
    qx.rows_mut(0, w).copy_from_slice(&params.alpha);
    let mut qu = DVector::zeros(m);
    for j in 0..nc {
        qu[ns + j] = -params.retail[j];
    }
    for (j, t) in params.tau.iter().enumerate() {
        qu[ns + nc + j] = *t;
    }
    let mut bilinear = DMatrix::zeros(n, m);
    for j in 0..ns {
        bilinear[(w + j, j)] = 1.0;
    }

    // Rows over (x, u) = (h, p, d, u).
    let h_max = DVector::from_column_slice(&params.h_max);
    let mut rows = DMatrix::zeros(3 * w + nc, n + m);
    let mut rhs = DVector::zeros(3 * w + nc);
    for i in 0..w {
        // h + flow u ≤ h_max
        rows[(i, i)] = 1.0;
        // −h − flow u ≤ 0
        rows[(w + i, i)] = -1.0;
        // A_out u − h ≤ 0
        rows[(2 * w + i, i)] = -1.0;
        for j in 0..m {
            rows[(i, n + j)] = flow[(i, j)];
            rows[(w + i, n + j)] = -flow[(i, j)];
            rows[(2 * w + i, n + j)] = a_out[(i, j)];
        }
        rhs[i] = h_max[i];
    }
    for j in 0..nc {
        // s ≤ d
        rows[(3 * w + j, n + ns + j)] = 1.0;
        rows[(3 * w + j, w + ns + j)] = -1.0;
    }
    Ok(StageCost::quadratic(qxx, DMatrix::zeros(m, m))
        .with_linear(qx, qu, 0.0)
        .with_bilinear(bilinear)
        .with_inequalities(rows, rhs)
        .with_input_box(
            &DVector::zeros(m),
            &DVector::from_column_slice(&params.u_max),
        ))
}

/// Supply-chain instance. The initial value function is the CE-LQR bound
/// obtained with the box penalty `½ u(u − u_max)` in place of the constraints;
/// it depends on the stock only.
pub fn make_supply_chain(params: &SupplyChainParams, _seed: u64) -> Result<Benchmark> {
    let sampler = Arc::new(SupplyChainSampler::new(params)?);
    let (dynamics, source) = monte_carlo_model(sampler, params.moments)?;
    let w = params.warehouses;
    let initial_state = InitialState::Stacked {
        parts: vec![
            InitialState::Uniform {
                lower: DVector::zeros(w),
                upper: DVector::from_column_slice(&params.h_max),
            },
            InitialState::LogNormal {
                mu: DVector::from_column_slice(&params.price_mu),
                cov: params.price_cov.clone(),
            },
            InitialState::LogNormal {
                mu: DVector::from_column_slice(&params.demand_mu),
                cov: params.demand_cov.clone(),
            },
        ],
    };
    let problem = ControlProblem::new(dynamics, supply_chain_cost(params)?, 1.0, initial_state)?;
    let m = params.links();
    let relaxation = Relaxation::box_penalty(
        &DVector::zeros(m),
        &DVector::from_column_slice(&params.u_max),
    );
    let lower_bound = ce_lqr_lower_bound(&problem, &relaxation)?;
    Ok(Benchmark {
        name: "supply-chain".into(),
        problem,
        initial_value: lower_bound.clone(),
        lower_bound,
        fit_coordinates: Some((0..w).collect()),
        moments: source,
    })
}

/// Problem selector shared by the CLI and experiment drivers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "kebab-case")]
pub enum ProblemConfig {
    ScalarLqr(ScalarLqrParams),
    BoxLqr(BoxLqrParams),
    Commitments(CommitmentsParams),
    SupplyChain(SupplyChainParams),
}

impl ProblemConfig {
    pub fn build(&self, seed: u64) -> Result<Benchmark> {
        match self {
            ProblemConfig::ScalarLqr(p) => make_scalar_lqr(p),
            ProblemConfig::BoxLqr(p) => make_box_lqr(p, seed),
            ProblemConfig::Commitments(p) => make_commitments(p, seed),
            ProblemConfig::SupplyChain(p) => make_supply_chain(p, seed),
        }
    }
}

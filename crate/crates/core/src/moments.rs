//! Expected value of a quadratic at the random next state, and Monte-Carlo
//! estimation of the dynamics moments it needs.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::seeded_rng;
use crate::model::{DynamicsMoments, DynamicsSampler, QuadraticFunction};

/// Default number of draws for Monte-Carlo moments.
pub const DEFAULT_MOMENT_SAMPLES: usize = 10_000;
/// Seed used when a problem generator estimates moments without an explicit seed.
pub const DEFAULT_MOMENT_SEED: u64 = 0x5eed_0a11;

/// Unbiased sample moments of `W = [A B c]` from `count` seeded draws.
pub fn moments_from_samples(
    sampler: &dyn DynamicsSampler,
    count: usize,
    seed: u64,
) -> Result<DynamicsMoments> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples to estimate moments, got {count}"
        )));
    }
    let n = sampler.state_dim();
    let m = sampler.input_dim();
    let dim = n * (n + m + 1);
    let mut rng = seeded_rng(seed, 0);
    let mut mean = DVector::<f64>::zeros(dim);
    let mut scatter = DMatrix::<f64>::zeros(dim, dim);
    let mut delta = DVector::<f64>::zeros(dim);
    for k in 0..count {
        let w = sampler.sample(&mut rng).stacked();
        check_dim("sampled transition size", dim, w.len())?;
        delta.copy_from(&w);
        delta -= &mean;
        mean.axpy(1.0 / (k + 1) as f64, &delta, 1.0);
        // Welford: scatter += (w - old mean)(w - new mean)ᵀ.
        let after = &w - &mean;
        scatter.ger(1.0, &delta, &after, 1.0);
    }
    let cov = crate::linalg::symmetrize(&scatter) / (count - 1) as f64;
    DynamicsMoments::from_covariance(
        n,
        m,
        DMatrix::from_column_slice(n, n + m + 1, mean.as_slice()),
        cov,
    )
}

/// `E V(A x + B u + c)` written as a quadratic in `u`:
/// `½ uᵀ M u + mᵀ u + ½ μ`.
#[derive(Clone, Debug, PartialEq)]
pub struct UQuadratic {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// Twice the value at `u = 0`, so that the full expectation is `½ μ` at `u = 0`.
    pub mu: f64,
}

impl UQuadratic {
    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.hessian * u)) + self.linear.dot(u) + 0.5 * self.mu
    }
}

/// Precomputed expectation of a fixed quadratic under fixed dynamics moments.
///
/// With `z = (x, u, 1)`, `E V(W z) = ½ zᵀ G z + pᵀ W̄ z + π` where
/// `G = E[Wᵀ P W]`.
#[derive(Clone, Debug)]
pub struct ExpectedQuadratic {
    n: usize,
    m: usize,
    gram: DMatrix<f64>,
    /// `W̄ᵀ p`.
    mean_lin: DVector<f64>,
    constant: f64,
}

impl ExpectedQuadratic {
    pub fn new(v: &QuadraticFunction, moments: &DynamicsMoments) -> Result<Self> {
        check_dim("value function dim", moments.state_dim(), v.dim())?;
        Ok(Self {
            n: moments.state_dim(),
            m: moments.input_dim(),
            gram: moments.column_gram(v.hessian()),
            mean_lin: moments.mean().transpose() * v.linear(),
            constant: v.constant(),
        })
    }

    /// `E[Wᵀ P W]` over `z = (x, u, 1)`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `W̄ᵀ p`.
    pub fn mean_linear(&self) -> &DVector<f64> {
        &self.mean_lin
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn at(&self, x: &DVector<f64>) -> Result<UQuadratic> {
        let (n, m) = (self.n, self.m);
        check_dim("state", n, x.len())?;
        let c = n + m;
        let g = &self.gram;
        let gxx = g.view((0, 0), (n, n));
        let gux = g.view((n, 0), (m, n));
        let gxc = g.view((0, c), (n, 1));
        let guc = g.view((n, c), (m, 1));
        let hessian = crate::linalg::symmetrize(&g.view((n, n), (m, m)).into_owned());
        let linear = gux * x + guc + self.mean_lin.rows(n, m);
        let mu = x.dot(&(gxx * x))
            + 2.0 * (gxc.transpose() * x)[0]
            + g[(c, c)]
            + 2.0 * (self.mean_lin.rows(0, n).dot(x) + self.mean_lin[c])
            + 2.0 * self.constant;
        Ok(UQuadratic {
            hessian,
            linear,
            mu,
        })
    }

    /// `E V(A x + B u + c)`.
    pub fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        check_dim("input", self.m, u.len())?;
        Ok(self.at(x)?.eval(u))
    }
}

/// Coefficients `(M, m, μ)` of `E V(A x + B u + c) = ½ uᵀMu + mᵀu + ½ μ`.
pub fn expected_quadratic(
    v: &QuadraticFunction,
    moments: &DynamicsMoments,
    x: &DVector<f64>,
) -> Result<UQuadratic> {
    ExpectedQuadratic::new(v, moments)?.at(x)
}

//! Oracles for the acceptance suite. None of these call into the
//! library's moment, fitting or dominance code.

#![allow(dead_code)]

pub mod properties;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// `G Gᵀ / n` for Gaussian `G`; positive definite almost surely.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, n, n);
    &g * g.transpose() / n as f64
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, n, n).qr().q()
}

pub fn quad(p: &DMatrix<f64>, lin: &DVector<f64>, c: f64, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(p * x)) + lin.dot(x) + c
}

/// Sample mean and standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `W = W̄ + Σₖ ξₖ Wₖ` with IID standard normal `ξₖ`.
pub struct FactorModel {
    pub n: usize,
    pub m: usize,
    pub mean: DMatrix<f64>,
    pub factors: Vec<DMatrix<f64>>,
}

impl FactorModel {
    pub fn random(rng: &mut ChaCha8Rng, n: usize, m: usize, factors: usize) -> Self {
        let q = n + m + 1;
        Self {
            n,
            m,
            mean: gaussian_matrix(rng, n, q) * 0.7,
            factors: (0..factors)
                .map(|_| gaussian_matrix(rng, n, q) * 0.3)
                .collect(),
        }
    }

    /// Covariance of `vec(W)` (column-major stacking).
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.n * (self.n + self.m + 1);
        let mut cov = DMatrix::zeros(d, d);
        for f in &self.factors {
            let v = DVector::from_column_slice(f.as_slice());
            cov += &v * v.transpose();
        }
        cov
    }

    /// Monte-Carlo mean and standard error of `V(W z)`, `z = (x, u, 1)`.
    pub fn monte_carlo(
        &self,
        p: &DMatrix<f64>,
        lin: &DVector<f64>,
        c: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        draws: usize,
        rng: &mut ChaCha8Rng,
    ) -> (f64, f64) {
        let mut z = DVector::zeros(self.n + self.m + 1);
        z.rows_mut(0, self.n).copy_from(x);
        z.rows_mut(self.n, self.m).copy_from(u);
        z[self.n + self.m] = 1.0;
        let base = &self.mean * &z;
        let dirs: Vec<DVector<f64>> = self.factors.iter().map(|f| f * &z).collect();
        let mut y = DVector::zeros(self.n);
        let values: Vec<f64> = (0..draws)
            .map(|_| {
                y.copy_from(&base);
                for d in &dirs {
                    let xi: f64 = rng.sample(StandardNormal);
                    y.axpy(xi, d, 1.0);
                }
                quad(p, lin, c, &y)
            })
            .collect();
        mean_se(&values)
    }
}

fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// Loss used by the gradient-fit oracle; `None` is `½‖e‖²`.
fn loss_and_grad(e: &DVector<f64>, huber: Option<f64>) -> (f64, DVector<f64>) {
    let r = e.norm();
    match huber {
        Some(m) if r > m => (m * (r - 0.5 * m), e * (m / r)),
        _ => (0.5 * r * r, e.clone()),
    }
}

/// `(1/N) Σ loss(P xᵢ + p − gᵢ)`.
pub fn gradient_fit_objective(
    xs: &[DVector<f64>],
    gs: &[DVector<f64>],
    p: &DMatrix<f64>,
    lin: &DVector<f64>,
    huber: Option<f64>,
) -> f64 {
    let n = xs.len() as f64;
    xs.iter()
        .zip(gs)
        .map(|(x, g)| loss_and_grad(&(p * x + lin - g), huber).0)
        .sum::<f64>()
        / n
}

/// Accelerated projected gradient (FISTA) over `P ⪰ 0`, `p` free.
pub fn gradient_fit_oracle(
    xs: &[DVector<f64>],
    gs: &[DVector<f64>],
    huber: Option<f64>,
    iterations: usize,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n = xs[0].len();
    let count = xs.len() as f64;
    // Lipschitz constant of the smooth objective: largest eigenvalue of the
    // second moment of (x, 1).
    let mut s = DMatrix::zeros(n + 1, n + 1);
    for x in xs {
        let z = x.clone().insert_row(n, 1.0);
        s += &z * z.transpose() / count;
    }
    let step = 1.0 / SymmetricEigen::new(s).eigenvalues.max();
    let grad = |p: &DMatrix<f64>, l: &DVector<f64>| {
        let mut gp = DMatrix::zeros(n, n);
        let mut gl = DVector::zeros(n);
        for (x, g) in xs.iter().zip(gs) {
            let (_, d) = loss_and_grad(&(p * x + l - g), huber);
            gp += &d * x.transpose() / count;
            gl += &d / count;
        }
        ((&gp + gp.transpose()) * 0.5, gl)
    };
    let (mut p, mut l) = (DMatrix::zeros(n, n), DVector::zeros(n));
    let (mut yp, mut yl) = (p.clone(), l.clone());
    let mut t = 1.0f64;
    for _ in 0..iterations {
        let (gp, gl) = grad(&yp, &yl);
        let np = project_psd(&(&yp - gp * step));
        let nl = &yl - gl * step;
        let nt = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let w = (t - 1.0) / nt;
        yp = &np + (&np - &p) * w;
        yl = &nl + (&nl - &l) * w;
        p = np;
        l = nl;
        t = nt;
    }
    let obj = gradient_fit_objective(xs, gs, &p, &l, huber);
    (p, l, obj)
}

/// Regular grid of `points_per_axis^n` points `center + R g`, `g ∈ [−L, L]ⁿ`.
pub fn grid(
    center: &DVector<f64>,
    rotation: &DMatrix<f64>,
    half_width: f64,
    points_per_axis: usize,
) -> Vec<DVector<f64>> {
    let n = center.len();
    let total = points_per_axis.pow(n as u32);
    let spacing = 2.0 * half_width / (points_per_axis - 1) as f64;
    (0..total)
        .map(|mut k| {
            let g = DVector::from_fn(n, |_, _| {
                let i = k % points_per_axis;
                k /= points_per_axis;
                -half_width + i as f64 * spacing
            });
            center + rotation * g
        })
        .collect()
}

/// Largest odd count whose `n`-th power stays within `budget`.
pub fn points_per_axis(n: usize, budget: usize) -> usize {
    let mut k = (budget as f64).powf(1.0 / n as f64).floor() as usize;
    while k.pow(n as u32) > budget {
        k -= 1;
    }
    if k.is_multiple_of(2) {
        k - 1
    } else {
        k
    }
}

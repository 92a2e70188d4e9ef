//! Ground-truth and classical baseline estimators: high-sample Monte Carlo
//! KL, the nearest-neighbour KL estimator, the KSG mutual-information
//! estimator, and the closed-form Gaussian KL used as a test oracle.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::function::gamma::digamma;
use thiserror::Error;

use crate::data::{gmm_log_density, GmmParams, SetSample};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("singular covariance")]
    SingularCovariance,
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    MonteCarloKl,
    KnnKl,
    KsgMi,
    ClosedFormKl,
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub value: f64,
    pub estimator: EstimatorKind,
    pub n_samples: usize,
    pub k: usize,
    pub stderr: Option<f64>,
}

/// Monte Carlo KL estimate over fresh draws from `p`:
/// mean of log p(x) - log q(x), with the standard error of that mean.
pub fn mc_kl(p: &GmmParams, q: &GmmParams, n_samples: usize, rng: &mut impl Rng) -> EstimateReport {
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n_samples {
        let x = p.sample(rng);
        let v = gmm_log_density(p, &x) - gmm_log_density(q, &x);
        sum += v;
        sumsq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    EstimateReport {
        value: mean,
        estimator: EstimatorKind::MonteCarloKl,
        n_samples,
        k: 0,
        stderr: Some((var / n).sqrt()),
    }
}

fn euclidean2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-th smallest element of `v` (1-based), by partial selection.
fn kth_smallest(v: &mut [f64], k: usize) -> f64 {
    let idx = k - 1;
    let (_, kth, _) = v.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).expect("finite"));
    *kth
}

/// Nearest-neighbour KL estimate between sample sets:
/// (d/n) sum_i ln(nu_k(i)/rho_k(i)) + ln(m/(n-1)) with Euclidean distances,
/// rho the k-NN radius within X excluding x_i, nu within Y. Zero distances
/// are perturbed by 1e-10; exact duplicates beyond that are an error.
pub fn knn_kl(x: &SetSample, y: &SetSample, k: usize) -> Result<EstimateReport> {
    let (n, m, d) = (x.n, y.n, x.d);
    if n <= k || m < k {
        return Err(OracleError::Degenerate(format!(
            "need n > k and m >= k, got n={n} m={m} k={k}"
        )));
    }
    if y.d != d {
        return Err(OracleError::Degenerate("dimension mismatch".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let xi = x.row(i);
        let mut dx: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| euclidean2(xi, x.row(j)).sqrt())
            .collect();
        let mut dy: Vec<f64> = (0..m).map(|j| euclidean2(xi, y.row(j)).sqrt()).collect();
        let rho = kth_smallest(&mut dx, k).max(1e-10);
        let nu = kth_smallest(&mut dy, k).max(1e-10);
        if rho <= 1e-10 && nu <= 1e-10 {
            return Err(OracleError::Degenerate(
                "duplicate points in both sets".into(),
            ));
        }
        total += (nu / rho).ln();
    }
    let value = (d as f64 / n as f64) * total + (m as f64 / (n as f64 - 1.0)).ln();
    Ok(EstimateReport {
        value,
        estimator: EstimatorKind::KnnKl,
        n_samples: n,
        k,
        stderr: None,
    })
}

fn max_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// KSG mutual-information estimate (first algorithm) on paired samples:
/// psi(k) + psi(n) - mean_i[psi(n_x(i)+1) + psi(n_y(i)+1)], using max-norm
/// neighborhoods in the joint space and strict marginal counts.
pub fn ksg_mi(x: &SetSample, y: &SetSample, k: usize) -> Result<EstimateReport> {
    let n = x.n;
    if y.n != n {
        return Err(OracleError::Degenerate("unpaired samples".into()));
    }
    if n <= k {
        return Err(OracleError::Degenerate(format!("need n > k, got n={n} k={k}")));
    }
    let mut acc = 0.0;
    for i in 0..n {
        let xi = x.row(i);
        let yi = y.row(i);
        // joint max-norm distance to the k-th neighbour
        let mut dj: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| max_norm(xi, x.row(j)).max(max_norm(yi, y.row(j))))
            .collect();
        let eps = kth_smallest(&mut dj, k).max(1e-12);
        let nx = (0..n)
            .filter(|&j| j != i && max_norm(xi, x.row(j)) < eps)
            .count();
        let ny = (0..n)
            .filter(|&j| j != i && max_norm(yi, y.row(j)) < eps)
            .count();
        acc += digamma((nx + 1) as f64) + digamma((ny + 1) as f64);
    }
    let value = digamma(k as f64) + digamma(n as f64) - acc / n as f64;
    Ok(EstimateReport {
        value,
        estimator: EstimatorKind::KsgMi,
        n_samples: n,
        k,
        stderr: None,
    })
}

/// Closed-form KL between Gaussians given means and covariance Cholesky
/// factors: 0.5 [tr(S2^-1 S1) + (m2-m1)' S2^-1 (m2-m1) - d + ln det S2/det S1].
pub fn gaussian_kl_closed_form(
    mu1: &DVector<f64>,
    chol1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    chol2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || chol1.nrows() != d || chol2.nrows() != d {
        return Err(OracleError::Degenerate("dimension mismatch".into()));
    }
    if (0..d).any(|i| chol2[(i, i)] <= 0.0) {
        return Err(OracleError::SingularCovariance);
    }
    // tr(S2^-1 S1) = ||L2^-1 L1||_F^2
    let a = chol2
        .solve_lower_triangular(chol1)
        .ok_or(OracleError::SingularCovariance)?;
    let trace = a.iter().map(|v| v * v).sum::<f64>();
    let diff = mu2 - mu1;
    let z = chol2
        .solve_lower_triangular(&diff)
        .ok_or(OracleError::SingularCovariance)?;
    let maha = z.norm_squared();
    let log_det = 2.0 * (0..d).map(|i| (chol2[(i, i)] / chol1[(i, i)]).ln()).sum::<f64>();
    Ok(0.5 * (trace + maha - d as f64 + log_det))
}

/// Closed-form MI for standardized Gaussian marginals with componentwise
/// correlation `rho` in `d` dimensions.
pub fn gaussian_mi_closed_form(rho: f64, d: usize) -> f64 {
    -(d as f64 / 2.0) * (1.0 - rho * rho).ln()
}

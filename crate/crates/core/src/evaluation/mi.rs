//! Numerical check of the variational mutual-information lower bound
//! I(z; x) ≥ E[log q(z | x)] + H(z) on a linear-Gaussian pair
//! z = A x + η, x ~ N(0, I), η ~ N(0, σ² I).

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MI_TOLERANCE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posterior {
    /// The true conditional N(A x, σ² I).
    Exact,
    /// Ignores cross terms: zⱼ | x ~ N(Aⱼⱼ xⱼ, Σₖ≠ⱼ Aⱼₖ² + σ²).
    /// Requires a square A.
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiConfig {
    /// Mixing matrix, row-major, `latent × dim`.
    pub a: Vec<Vec<f64>>,
    pub noise_var: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub posterior: Posterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIBoundReport {
    pub seed: u64,
    pub posterior: Posterior,
    pub n_samples: usize,
    pub analytic_mi: f64,
    pub entropy_z: f64,
    pub bound_value: f64,
    /// analytic_mi − bound_value.
    pub gap: f64,
    /// Monte-Carlo standard error of the bound.
    pub std_error: f64,
}

/// log det of a symmetric positive-definite matrix.
pub fn log_det_spd(m: DMatrix<f64>) -> Result<f64> {
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Undefined("singular covariance".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

fn matrix(a: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let rows = a.len();
    let cols = a.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 || a.iter().any(|r| r.len() != cols) {
        return Err(Error::config("a", "must be a non-empty rectangular matrix"));
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| a[i][j]))
}

/// ½ log det(I + A Aᵀ / σ²).
pub fn gaussian_mi(a: &DMatrix<f64>, noise_var: f64) -> Result<f64> {
    let m = a.nrows();
    Ok(0.5 * log_det_spd(DMatrix::identity(m, m) + a * a.transpose() / noise_var)?)
}

pub fn mi_bound_check(cfg: &MiConfig) -> Result<MIBoundReport> {
    let a = matrix(&cfg.a)?;
    let (m, dim) = a.shape();
    if !(cfg.noise_var > 0.0 && cfg.noise_var.is_finite()) {
        return Err(Error::config("noise_var", "must be positive"));
    }
    if cfg.n_samples < 2 {
        return Err(Error::config("n_samples", "must be at least 2"));
    }
    if cfg.posterior == Posterior::Diagonal && m != dim {
        return Err(Error::config("a", "the diagonal posterior needs a square matrix"));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let cov_z = &a * a.transpose() + DMatrix::identity(m, m) * cfg.noise_var;
    let entropy_z = 0.5 * (m as f64 * (two_pi * std::f64::consts::E).ln() + log_det_spd(cov_z)?);
    let diag_var: Vec<f64> = (0..m)
        .map(|j| (0..dim).filter(|&k| k != j).map(|k| a[(j, k)].powi(2)).sum::<f64>() + cfg.noise_var)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigma = cfg.noise_var.sqrt();
    let mut x = vec![0.0; dim];
    let mut z = vec![0.0; m];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..cfg.n_samples {
        for v in x.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for (j, zj) in z.iter_mut().enumerate() {
            let eta: f64 = StandardNormal.sample(&mut rng);
            *zj = (0..dim).map(|k| a[(j, k)] * x[k]).sum::<f64>() + sigma * eta;
        }
        let log_q: f64 = match cfg.posterior {
            Posterior::Exact => (0..m)
                .map(|j| {
                    let r = z[j] - (0..dim).map(|k| a[(j, k)] * x[k]).sum::<f64>();
                    -0.5 * (two_pi * cfg.noise_var).ln() - r * r / (2.0 * cfg.noise_var)
                })
                .sum(),
            Posterior::Diagonal => (0..m)
                .map(|j| {
                    let r = z[j] - a[(j, j)] * x[j];
                    -0.5 * (two_pi * diag_var[j]).ln() - r * r / (2.0 * diag_var[j])
                })
                .sum(),
        };
        sum += log_q;
        sum_sq += log_q * log_q;
    }
    let n = cfg.n_samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    let analytic_mi = gaussian_mi(&a, cfg.noise_var)?;
    let bound_value = entropy_z + mean;
    Ok(MIBoundReport {
        seed: cfg.seed,
        posterior: cfg.posterior,
        n_samples: cfg.n_samples,
        analytic_mi,
        entropy_z,
        bound_value,
        gap: analytic_mi - bound_value,
        std_error: (var / n).sqrt(),
    })
}

//! Random Fourier decomposition of the Gaussian reverse kernel.
//!
//! With `omega ~ N(0, I_d)`,
//! `E[phi(omega, mu)^T rho(omega, x)] = N(x | mu, beta_tilde I)`,
//! so averaging over `M` sampled frequencies gives an unbiased Monte Carlo
//! estimate of the transition density with `O_p(1/sqrt(M))` error.

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone)]
pub struct FourierBasis {
    pub omegas: Vec<Vec<f64>>,
    pub beta_tilde: f64,
}

impl FourierBasis {
    pub fn sample(m: usize, dim: usize, beta_tilde: f64, rng: &mut Stream) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("basis needs at least one frequency".into()));
        }
        if beta_tilde <= 0.0 {
            return Err(Error::Numeric("beta_tilde must be positive".into()));
        }
        Ok(Self {
            omegas: (0..m).map(|_| rng.normal_vec(dim)).collect(),
            beta_tilde,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `phi = (cos(w^T mu / sqrt(bt)), sin(w^T mu / sqrt(bt)))`.
pub fn phi(omega: &[f64], mu: &[f64], beta_tilde: f64) -> Result<[f64; 2]> {
    if beta_tilde <= 0.0 {
        return Err(Error::Numeric("beta_tilde must be positive".into()));
    }
    if omega.len() != mu.len() {
        return Err(Error::Shape("omega/mu length mismatch".into()));
    }
    let arg = dot(omega, mu) / beta_tilde.sqrt();
    Ok([arg.cos(), arg.sin()])
}

/// `rho = (2 pi bt)^(-d/2) (cos(w^T x / sqrt(bt)), sin(w^T x / sqrt(bt)))`.
pub fn rho(omega: &[f64], x_next: &[f64], beta_tilde: f64, dim: usize) -> Result<[f64; 2]> {
    if beta_tilde <= 0.0 {
        return Err(Error::Numeric("beta_tilde must be positive".into()));
    }
    if omega.len() != x_next.len() {
        return Err(Error::Shape("omega/x length mismatch".into()));
    }
    let norm = (2.0 * std::f64::consts::PI * beta_tilde).powf(-(dim as f64) / 2.0);
    let arg = dot(omega, x_next) / beta_tilde.sqrt();
    Ok([norm * arg.cos(), norm * arg.sin()])
}

/// `(1/M) sum_i phi(w_i, mu)^T rho(w_i, x)`: an unbiased estimate of
/// `N(x | mu, beta_tilde I)`.
pub fn kernel_mc_estimate(basis: &FourierBasis, mu: &[f64], x_next: &[f64]) -> Result<f64> {
    let d = mu.len();
    let mut total = 0.0;
    for omega in &basis.omegas {
        let p = phi(omega, mu, basis.beta_tilde)?;
        let r = rho(omega, x_next, basis.beta_tilde, d)?;
        total += p[0] * r[0] + p[1] * r[1];
    }
    Ok(total / basis.omegas.len() as f64)
}

/// Exact Gaussian density the estimator targets.
pub fn gaussian_density(x: &[f64], mu: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    (2.0 * std::f64::consts::PI * var).powf(-d / 2.0) * (-sq / (2.0 * var)).exp()
}

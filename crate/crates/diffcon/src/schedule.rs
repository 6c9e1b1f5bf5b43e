//! Diffusion coefficient tables under reversed indexing: `x_T` is the clean
//! sample and `x_1` is pure noise.
//!
//! For a horizon `T` the variance schedule `beta_t` lives on `t = 1..T-1`,
//! with `alpha_t = 1 - beta_t`, `alpha_bar_t = prod_{i=t}^{T-1} alpha_i`
//! (so `alpha_bar_T = 1` as the empty product), and the reverse-time variance
//! `beta_tilde_t = beta_t (1 - alpha_bar_{t+1}) / (1 - alpha_bar_t)`. The
//! boundary convention makes the final reverse step deterministic:
//! `beta_tilde_{T-1} = 0`.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_horizon: usize,
    beta: Vec<f64>,       // index t-1 holds beta_t, t = 1..T-1
    alpha: Vec<f64>,      // same indexing
    alpha_bar: Vec<f64>,  // index t-1 holds alpha_bar_t, t = 1..T
    beta_tilde: Vec<f64>, // index t-1 holds beta_tilde_t, t = 1..T-1
}

impl NoiseSchedule {
    /// Constant schedule `beta_t = beta`.
    pub fn constant(t_horizon: usize, beta: f64) -> Result<Self> {
        if !(0.0 < beta && beta < 1.0) {
            return Err(Error::Config(format!("beta {beta} outside (0, 1)")));
        }
        Self::from_betas(t_horizon, vec![beta; t_horizon.saturating_sub(1)])
    }

    /// Linear schedule with `beta_1 = beta_max` (most noise next to pure
    /// noise under reversed indexing) down to `beta_{T-1} = beta_min`.
    pub fn linear(t_horizon: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        if t_horizon < 2 {
            return Err(Error::Config("horizon must be >= 2".into()));
        }
        let n = t_horizon - 1;
        let betas = (0..n)
            .map(|i| {
                if n == 1 {
                    beta_max
                } else {
                    beta_max + (beta_min - beta_max) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        Self::from_betas(t_horizon, betas)
    }

    fn from_betas(t_horizon: usize, beta: Vec<f64>) -> Result<Self> {
        if t_horizon < 2 {
            return Err(Error::Config("horizon must be >= 2".into()));
        }
        if beta.len() != t_horizon - 1 {
            return Err(Error::Shape(format!(
                "expected {} betas, got {}",
                t_horizon - 1,
                beta.len()
            )));
        }
        if beta.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        // alpha_bar_t = alpha_t * alpha_bar_{t+1}, alpha_bar_T = 1.
        let mut alpha_bar = vec![1.0; t_horizon];
        for t in (0..t_horizon - 1).rev() {
            alpha_bar[t] = alpha[t] * alpha_bar[t + 1];
        }
        let beta_tilde: Vec<f64> = (0..t_horizon - 1)
            .map(|t| beta[t] * (1.0 - alpha_bar[t + 1]) / (1.0 - alpha_bar[t]))
            .collect();
        Ok(Self {
            t_horizon,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    #[inline]
    pub fn horizon(&self) -> usize {
        self.t_horizon
    }

    /// `beta_t`, valid for `1 <= t <= T-1`.
    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`, valid for `1 <= t <= T`.
    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    #[inline]
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    /// Validates a reverse-step index, i.e. `1 <= t <= T-1`.
    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t >= self.t_horizon {
            return Err(Error::Range(format!(
                "step {t} outside 1..={} for horizon {}",
                self.t_horizon - 1,
                self.t_horizon
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_t3_tables() {
        let s = NoiseSchedule::constant(3, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.81).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.9).abs() < 1e-15);
        assert_eq!(s.alpha_bar(3), 1.0);
        assert!((s.beta_tilde(1) - 0.1 * 0.1 / 0.19).abs() < 1e-15);
        assert_eq!(s.beta_tilde(2), 0.0);
    }

    #[test]
    fn alpha_bar_terminal_is_one_for_any_schedule() {
        for t in [2, 5, 17] {
            let s = NoiseSchedule::constant(t, 0.3).unwrap();
            assert_eq!(s.alpha_bar(t), 1.0);
        }
    }

    #[test]
    fn linear_matches_spec_example() {
        let s = NoiseSchedule::linear(4, 0.01, 0.03).unwrap();
        assert!((s.beta(1) - 0.03).abs() < 1e-15);
        assert!((s.beta(2) - 0.02).abs() < 1e-15);
        assert!((s.beta(3) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn degenerate_linear_equals_constant() {
        let a = NoiseSchedule::linear(6, 0.05, 0.05).unwrap();
        let b = NoiseSchedule::constant(6, 0.05).unwrap();
        for t in 1..6 {
            assert_eq!(a.beta(t), b.beta(t));
            assert_eq!(a.beta_tilde(t), b.beta_tilde(t));
        }
    }

    #[test]
    fn invariants_hold_at_scale() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        for t in 1..1000 {
            // Recurrence consistency.
            assert_eq!(s.alpha_bar(t), s.alpha(t) * s.alpha_bar(t + 1));
            // DDPM variance identity.
            let lhs = 1.0 - s.alpha_bar(t);
            let rhs = s.alpha(t) * (1.0 - s.alpha_bar(t + 1)) + s.beta(t);
            assert!((lhs - rhs).abs() < 1e-12, "t={t}: {lhs} vs {rhs}");
            // Monotonicity and bounds.
            assert!(s.alpha_bar(t) < s.alpha_bar(t + 1));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
            assert!(s.beta_tilde(t) >= 0.0 && s.beta_tilde(t) <= s.beta(t));
        }
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(NoiseSchedule::constant(3, 0.0).is_err());
        assert!(NoiseSchedule::constant(3, 1.0).is_err());
        assert!(NoiseSchedule::constant(1, 0.1).is_err());
        assert!(NoiseSchedule::linear(4, 0.2, 0.1).is_err());
    }
}

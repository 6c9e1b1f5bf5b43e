//! The f-divergence family shared by advantage, weighting, and oracle code.
//!
//! KL uses `f(t) = t ln t`. The alpha divergence uses
//! `f_a(t) = (t^a - a t + a - 1) / (a (a - 1))`, the unique antiderivative of
//! `f'_a(t) = (t^(a-1) - 1) / (a - 1)` with `f_a(1) = 0`; that normalization
//! is forced by the polynomial weighting's `(f')^{-1}` form.

use std::sync::Arc;

use crate::error::{Error, Result};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum FDiv {
    Kl,
    Alpha(f64),
    Custom {
        f: ScalarFn,
        fprime: ScalarFn,
        fprime_inv: ScalarFn,
    },
}

impl std::fmt::Debug for FDiv {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FDiv::Kl => write!(fm, "FDiv::Kl"),
            FDiv::Alpha(a) => write!(fm, "FDiv::Alpha({a})"),
            FDiv::Custom { .. } => write!(fm, "FDiv::Custom"),
        }
    }
}

/// Outcome of a divergence evaluation; a support violation is a value, not a
/// float infinity, so callers decide policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Divergence {
    Finite(f64),
    Infinite,
}

impl Divergence {
    pub fn finite(self) -> Option<f64> {
        match self {
            Divergence::Finite(v) => Some(v),
            Divergence::Infinite => None,
        }
    }
}

impl FDiv {
    pub fn kl() -> Self {
        FDiv::Kl
    }

    pub fn alpha(a: f64) -> Result<Self> {
        if !(a.is_finite() && a > 0.0 && a != 1.0) {
            return Err(Error::Config(format!(
                "alpha divergence needs alpha > 0, alpha != 1; got {a}"
            )));
        }
        Ok(FDiv::Alpha(a))
    }

    /// Custom generator; `f(1) = 0` and convexity on a log grid are
    /// spot-checked at construction.
    pub fn custom(f: ScalarFn, fprime: ScalarFn, fprime_inv: ScalarFn) -> Result<Self> {
        if f(1.0).abs() > 1e-12 {
            return Err(Error::Config("custom f must satisfy f(1) = 0".into()));
        }
        let grid: Vec<f64> = (0..40).map(|i| 10f64.powf(-2.0 + i as f64 * 0.1)).collect();
        for w in grid.windows(3) {
            let second = f(w[0]) - 2.0 * f(w[1]) + f(w[2]);
            if second < -1e-9 {
                return Err(Error::Config(
                    "custom f fails the convexity spot check".into(),
                ));
            }
        }
        Ok(FDiv::Custom {
            f,
            fprime,
            fprime_inv,
        })
    }

    /// Parse the config spelling: `kl` or `alpha:<value>`.
    pub fn from_name(name: &str) -> Result<Self> {
        if name == "kl" {
            return Ok(FDiv::Kl);
        }
        if let Some(rest) = name.strip_prefix("alpha:") {
            let a: f64 = rest
                .parse()
                .map_err(|_| Error::Config(format!("bad alpha value {rest:?}")))?;
            return FDiv::alpha(a);
        }
        Err(Error::Config(format!(
            "unknown divergence {name:?}; expected \"kl\" or \"alpha:<value>\""
        )))
    }

    pub fn name(&self) -> String {
        match self {
            FDiv::Kl => "kl".into(),
            FDiv::Alpha(a) => format!("alpha:{a}"),
            FDiv::Custom { .. } => "custom".into(),
        }
    }

    /// `f(t)` for `t > 0`.
    pub fn f(&self, t: f64) -> Result<f64> {
        if t <= 0.0 {
            return Err(Error::Numeric(format!("f domain error: t = {t}")));
        }
        Ok(match self {
            FDiv::Kl => t * t.ln(),
            FDiv::Alpha(a) => (t.powf(*a) - a * t + a - 1.0) / (a * (a - 1.0)),
            FDiv::Custom { f, .. } => f(t),
        })
    }

    /// Continuity limit of `f` at `t = 0+`, used for zero-probability terms
    /// in discrete divergences.
    fn f_at_zero(&self) -> f64 {
        match self {
            FDiv::Kl => 0.0,
            FDiv::Alpha(a) => 1.0 / a,
            FDiv::Custom { f, .. } => f(1e-300),
        }
    }

    /// `f'(t)` for `t > 0`.
    pub fn fprime(&self, t: f64) -> Result<f64> {
        if t <= 0.0 {
            return Err(Error::Numeric(format!("f' domain error: t = {t}")));
        }
        Ok(match self {
            FDiv::Kl => t.ln() + 1.0,
            FDiv::Alpha(a) => (t.powf(a - 1.0) - 1.0) / (a - 1.0),
            FDiv::Custom { fprime, .. } => fprime(t),
        })
    }

    /// `(f')^{-1}(y)`; for the alpha family this is
    /// `[1 + (a-1) y]_+^{1/(a-1)}`.
    pub fn fprime_inv(&self, y: f64) -> f64 {
        match self {
            FDiv::Kl => (y - 1.0).exp(),
            FDiv::Alpha(a) => {
                let base = 1.0 + (a - 1.0) * y;
                if base <= 0.0 {
                    if *a > 1.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    base.powf(1.0 / (a - 1.0))
                }
            }
            FDiv::Custom { fprime_inv, .. } => fprime_inv(y),
        }
    }

    /// `ln (f')^{-1}(y)` where defined; `None` encodes weight zero. Keeping
    /// this in log space is what lets baselines be bisected at tau down to
    /// 1e-4 without overflowing.
    pub(crate) fn log_fprime_inv(&self, y: f64) -> Option<f64> {
        match self {
            FDiv::Kl => Some(y - 1.0),
            FDiv::Alpha(a) => {
                let base = 1.0 + (a - 1.0) * y;
                if base <= 0.0 {
                    if *a > 1.0 {
                        None
                    } else {
                        Some(f64::INFINITY)
                    }
                } else {
                    Some(base.ln() / (a - 1.0))
                }
            }
            FDiv::Custom { fprime_inv, .. } => {
                let w = fprime_inv(y);
                if w <= 0.0 {
                    None
                } else {
                    Some(w.ln())
                }
            }
        }
    }
}

/// `sum_x q(x) f(p(x)/q(x))` over a shared finite support.
pub fn div_discrete(fd: &FDiv, p: &[f64], q: &[f64]) -> Result<Divergence> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < 0.0 || qi < 0.0 {
            return Err(Error::Numeric("negative probability".into()));
        }
    }
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    if (sp - 1.0).abs() > 1e-10 || (sq - 1.0).abs() > 1e-10 {
        return Err(Error::Numeric(format!(
            "distributions must sum to 1 (got {sp} and {sq})"
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if qi == 0.0 {
            if pi > 0.0 {
                return Ok(Divergence::Infinite);
            }
            continue;
        }
        if pi == 0.0 {
            total += qi * fd.f_at_zero();
        } else {
            total += qi * fd.f(pi / qi)?;
        }
    }
    Ok(Divergence::Finite(total))
}

/// KL between two diagonal Gaussians that share covariance `sigma2 I`:
/// `||mu1 - mu2||^2 / (2 sigma2)`.
pub fn kl_gauss_shared_cov(mu1: &[f64], mu2: &[f64], sigma2: f64) -> Result<f64> {
    if mu1.len() != mu2.len() {
        return Err(Error::Shape("mean lengths differ".into()));
    }
    if sigma2 <= 0.0 {
        return Err(Error::Numeric(format!("sigma2 must be positive: {sigma2}")));
    }
    let sq: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (2.0 * sigma2))
}

//! Reward weightings and the reward-weighted score-matching loss.

use crate::diffusion::{q_sample, EpsModel};
use crate::error::{Error, Result};
use crate::fdiv::FDiv;
use crate::lsmdp::solve_baseline;
use crate::rng::Stream;
use crate::schedule::NoiseSchedule;

/// Weighting families: exponential for KL, polynomial for the alpha
/// divergence, and the linear reward-as-weight baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Exponential,
    Polynomial { alpha: f64 },
    Linear,
}

impl Weighting {
    /// The weighting a divergence choice implies.
    pub fn from_fdiv(fd: &FDiv) -> Result<Self> {
        match fd {
            FDiv::Kl => Ok(Weighting::Exponential),
            FDiv::Alpha(a) => Ok(Weighting::Polynomial { alpha: *a }),
            FDiv::Custom { .. } => Err(Error::Config(
                "no closed-form weighting for a custom divergence".into(),
            )),
        }
    }
}

/// Baseline already resolved to numbers (the training loop handles
/// first-batch-mean statefulness before calling in).
#[derive(Debug, Clone)]
pub enum ResolvedBaseline {
    None,
    Fixed(f64),
    /// Shift by the batch max, then renormalize weights to mean one. The
    /// shift-and-rescale leaves the weighted-loss minimizer unchanged.
    BatchMax,
    BatchMean,
    /// Bisect `b` so the weights average to one under the given terminal
    /// probabilities.
    Exact { probs: Vec<f64> },
}

/// Per-sample weights `w(r)`.
///
/// Exponential: `exp((r - b)/tau)`; polynomial:
/// `[1 + (alpha-1)(r - b)/tau]_+^{1/(alpha-1)}`; linear: `max(r - b, 0)`.
pub fn rwl_weights(
    rewards: &[f64],
    weighting: &Weighting,
    tau: f64,
    baseline: &ResolvedBaseline,
) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Config("empty reward batch".into()));
    }
    if tau <= 0.0 && !matches!(weighting, Weighting::Linear) {
        return Err(Error::Numeric(format!("tau must be positive: {tau}")));
    }
    let batch_max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let batch_mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let (b, renorm) = match baseline {
        ResolvedBaseline::None => (0.0, false),
        ResolvedBaseline::Fixed(v) => (*v, false),
        ResolvedBaseline::BatchMax => (batch_max, true),
        ResolvedBaseline::BatchMean => (batch_mean, false),
        ResolvedBaseline::Exact { probs } => {
            let fd = match weighting {
                Weighting::Exponential => FDiv::kl(),
                Weighting::Polynomial { alpha } => FDiv::alpha(*alpha)?,
                Weighting::Linear => {
                    return Err(Error::Config(
                        "exact-bisection baseline is undefined for linear weights".into(),
                    ))
                }
            };
            (solve_baseline(&fd, rewards, probs, tau)?, false)
        }
    };
    let mut weights = Vec::with_capacity(rewards.len());
    for &r in rewards {
        let w = match weighting {
            Weighting::Exponential => ((r - b) / tau).exp(),
            Weighting::Polynomial { alpha } => {
                let base = 1.0 + (alpha - 1.0) * (r - b) / tau;
                if base <= 0.0 {
                    0.0
                } else {
                    base.powf(1.0 / (alpha - 1.0))
                }
            }
            Weighting::Linear => (r - b).max(0.0),
        };
        if !w.is_finite() {
            return Err(Error::Numeric(format!(
                "weight overflow at reward {r}; use a larger tau or a baseline shift"
            )));
        }
        weights.push(w);
    }
    if renorm {
        let mean: f64 = weights.iter().sum::<f64>() / weights.len() as f64;
        if mean > 0.0 {
            for w in weights.iter_mut() {
                *w /= mean;
            }
        }
    }
    Ok(weights)
}

/// Weighted score-matching loss on behavior samples: per example draws fresh
/// `t ~ U{1..T-1}` and `xi ~ N(0, I)` and scales
/// `1/2 ||xi - eps(q_sample(x_T, t, xi), c, t)||^2` by its weight. Gradients
/// reach only the model's trainable parameters.
pub fn rwl_loss<M: EpsModel>(
    model: &M,
    sched: &NoiseSchedule,
    samples: &[(Vec<f64>, usize)],
    weights: &[f64],
    rng: &mut Stream,
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if samples.len() != weights.len() {
        return Err(Error::Shape(format!(
            "weights {} != samples {}",
            weights.len(),
            samples.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Numeric("weights must be nonnegative".into()));
    }
    let d = model.data_dim();
    let t_max = sched.horizon();
    let n = samples.len() as f64;
    let mut grads = vec![0.0; model.trainable_len()];
    let mut loss = 0.0;
    for ((x_clean, c), &w) in samples.iter().zip(weights) {
        let t = 1 + rng.below(t_max - 1);
        let xi = rng.normal_vec(d);
        if w == 0.0 {
            continue;
        }
        let x_t = q_sample(sched, x_clean, t, &xi)?;
        let eps = model.predict(&x_t, Some(*c), t)?;
        let resid: Vec<f64> = eps.iter().zip(&xi).map(|(e, nz)| e - nz).collect();
        loss += 0.5 * w * resid.iter().map(|r| r * r).sum::<f64>();
        let upstream: Vec<f64> = resid.iter().map(|r| w * r / n).collect();
        model.accumulate_grad(&x_t, Some(*c), t, &upstream, &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite weighted loss".into()));
    }
    Ok((loss / n, grads))
}

//! Reward specifications, recorded trajectories, and batched rollouts.

use rayon::prelude::*;

use crate::controller::ComposedModel;
use crate::diffusion::{gaussian_logpdf, predict_guided, reverse_mean, EpsModel};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Terminal reward families used by the toy experiments.
#[derive(Debug, Clone)]
pub enum RewardForm {
    /// `r(x) = a^T x`
    Linear { a: Vec<f64> },
    /// `r(x) = -kappa ||x||^2 / 2`
    Quadratic { kappa: f64 },
    /// `high` inside the ball `||x - center|| <= radius`, `low` outside.
    Region {
        center: Vec<f64>,
        radius: f64,
        high: f64,
        low: f64,
    },
    /// Per-state rewards for tabular experiments.
    Tabular { r: Vec<f64> },
}

/// How the scalar baseline `b` is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineMode {
    Fixed(f64),
    /// Freeze the mean reward of the first training batch.
    FirstBatchMean,
    /// Mean of the current batch.
    BatchMean,
    /// Max of the current batch (the overflow-safe shift for exponential
    /// weights).
    BatchMax,
    /// Bisect `b` so the optimal weights average to one under given
    /// probabilities.
    ExactBisection,
}

#[derive(Debug, Clone)]
pub struct RewardSpec {
    pub form: RewardForm,
    pub tau: f64,
    pub baseline: BaselineMode,
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 0.0 {
            return Err(Error::Config("tau must be nonnegative".into()));
        }
        if let RewardForm::Region { high, low, radius, .. } = &self.form {
            if high <= low {
                return Err(Error::Config("region reward needs high > low".into()));
            }
            if *radius <= 0.0 {
                return Err(Error::Config("region radius must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], _c: Option<usize>) -> f64 {
        match &self.form {
            RewardForm::Linear { a } => a.iter().zip(x).map(|(ai, xi)| ai * xi).sum(),
            RewardForm::Quadratic { kappa } => {
                -kappa * x.iter().map(|v| v * v).sum::<f64>() / 2.0
            }
            RewardForm::Region {
                center,
                radius,
                high,
                low,
            } => {
                let d2: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2.sqrt() <= *radius {
                    *high
                } else {
                    *low
                }
            }
            RewardForm::Tabular { .. } => {
                f64::NAN // tabular rewards are indexed by state, not by x
            }
        }
    }
}

/// One reverse-process path with everything RL fine-tuning needs: states,
/// per-step means under the behavior and pretrained policies, both log-density
/// tracks (absent at deterministic steps), and the terminal reward.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub condition: usize,
    pub states: Vec<Vec<f64>>,
    pub means_behavior: Vec<Vec<f64>>,
    pub means_pretrained: Vec<Vec<f64>>,
    pub logp_behavior: Vec<Option<f64>>,
    pub logp_pretrained: Vec<Option<f64>>,
    pub reward: f64,
}

impl Trajectory {
    /// Per-step log ratios `ln(p_behavior / p_pretrained)` over stochastic
    /// steps only.
    pub fn log_ratios(&self) -> Vec<f64> {
        self.logp_behavior
            .iter()
            .zip(&self.logp_pretrained)
            .filter_map(|(b, p)| match (b, p) {
                (Some(lb), Some(lp)) => Some(lb - lp),
                _ => None,
            })
            .collect()
    }

    pub fn n_stochastic_steps(&self) -> usize {
        self.logp_behavior.iter().filter(|p| p.is_some()).count()
    }
}

/// Reward plus per-step log ratios; the common currency between neural and
/// tabular Monte Carlo estimators.
#[derive(Debug, Clone)]
pub struct TrajStats {
    pub reward: f64,
    pub log_ratios: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
}

impl RolloutBatch {
    pub fn stats(&self) -> Vec<TrajStats> {
        self.trajectories
            .iter()
            .map(|t| TrajStats {
                reward: t.reward,
                log_ratios: t.log_ratios(),
            })
            .collect()
    }

    pub fn mean_reward(&self) -> f64 {
        self.trajectories.iter().map(|t| t.reward).sum::<f64>() / self.trajectories.len() as f64
    }

    /// Monte Carlo estimate of `KL(behavior || pretrained)` from the recorded
    /// log-density tracks.
    pub fn mean_kl(&self) -> f64 {
        self.trajectories
            .iter()
            .map(|t| t.log_ratios().iter().sum::<f64>())
            .sum::<f64>()
            / self.trajectories.len() as f64
    }
}

fn rollout_one(
    behavior: &ComposedModel,
    reward: &RewardSpec,
    cond_probs: &[f64],
    lambda_cfg: f64,
    rng: &mut Stream,
) -> Result<Trajectory> {
    let sched = &behavior.sched;
    let d = behavior.data_dim();
    let t_max = sched.horizon();
    let c = rng.categorical(cond_probs);
    let mut x = rng.normal_vec(d);
    let mut states = vec![x.clone()];
    let mut means_behavior = Vec::with_capacity(t_max - 1);
    let mut means_pretrained = Vec::with_capacity(t_max - 1);
    let mut logp_behavior = Vec::with_capacity(t_max - 1);
    let mut logp_pretrained = Vec::with_capacity(t_max - 1);
    for t in 1..t_max {
        let eps_b = predict_guided(behavior, &x, Some(c), t, lambda_cfg)?;
        let eps_p = predict_guided(behavior.pretrained(), &x, Some(c), t, lambda_cfg)?;
        let mean_b = reverse_mean(sched, &x, &eps_b, t)?;
        let mean_p = reverse_mean(sched, &x, &eps_p, t)?;
        let bt = sched.beta_tilde(t);
        let next = if bt > 0.0 {
            let xi = rng.normal_vec(d);
            let sd = bt.sqrt();
            let next: Vec<f64> = mean_b.iter().zip(&xi).map(|(m, n)| m + sd * n).collect();
            logp_behavior.push(Some(gaussian_logpdf(&next, &mean_b, bt)));
            logp_pretrained.push(Some(gaussian_logpdf(&next, &mean_p, bt)));
            next
        } else {
            logp_behavior.push(None);
            logp_pretrained.push(None);
            mean_b.clone()
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { t });
        }
        means_behavior.push(mean_b);
        means_pretrained.push(mean_p);
        states.push(next.clone());
        x = next;
    }
    let r = reward.eval(&x, Some(c));
    Ok(Trajectory {
        condition: c,
        states,
        means_behavior,
        means_pretrained,
        logp_behavior,
        logp_pretrained,
        reward: r,
    })
}

/// `n` trajectories under the behavior model, each on its own derived stream
/// so the batch is byte-identical regardless of worker scheduling.
///
/// Log-densities use the mean implied by `lambda_cfg`; RL training passes 0
/// here (guidance is an inference-time device), which the config surfaces as
/// the `rollout_cfg` flag.
pub fn rollout(
    behavior: &ComposedModel,
    reward: &RewardSpec,
    cond_probs: &[f64],
    n: usize,
    lambda_cfg: f64,
    stream: &Stream,
) -> Result<RolloutBatch> {
    if n == 0 {
        return Err(Error::Config("rollout needs n >= 1".into()));
    }
    reward.validate()?;
    let trajectories: Result<Vec<Trajectory>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.derive(i as u64);
            rollout_one(behavior, reward, cond_probs, lambda_cfg, &mut rng)
        })
        .collect();
    Ok(RolloutBatch {
        trajectories: trajectories?,
    })
}

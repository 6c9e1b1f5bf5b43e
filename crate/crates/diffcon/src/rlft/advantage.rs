//! Soft advantages: exact on tabular chains, Monte Carlo from rollouts.
//!
//! `A_{t+1} = V_{t+1}(s') - tau f'(zeta) - V_t(s)
//!            + tau E[f'(zeta) - f(zeta)/zeta]`
//! with `zeta` the behavior/passive density ratio; its conditional mean under
//! the behavior policy is exactly zero.

use crate::error::{Error, Result};
use crate::fdiv::{div_discrete, Divergence, FDiv};
use crate::lsmdp::TabularChain;
use crate::rlft::trajectory::TrajStats;
use crate::rng::Stream;

/// A tabular behavior policy: a controlled initial distribution plus one
/// row-stochastic kernel per step.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    pub init: Vec<f64>,
    pub kernels: Vec<Vec<Vec<f64>>>,
}

impl TabularPolicy {
    pub fn passive(chain: &TabularChain) -> Self {
        Self {
            init: chain.init.clone(),
            kernels: chain.kernels.clone(),
        }
    }

    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![self.init.clone()];
        for k in &self.kernels {
            let prev = out.last().unwrap();
            let mut next = vec![0.0; prev.len()];
            for (s, &m) in prev.iter().enumerate() {
                for (sp, &p) in k[s].iter().enumerate() {
                    next[sp] += m * p;
                }
            }
            out.push(next);
        }
        out
    }
}

/// Values of a *given* policy (not the optimum): `V_T = r`,
/// `V_t(s) = E_pi[V_{t+1}] - tau D_f(pi(s,.) || P(s,.))`, plus the virtual
/// initial step. With `tau = 0` the divergence term is dropped entirely.
pub fn policy_values(
    chain: &TabularChain,
    policy: &TabularPolicy,
    tau: f64,
    fd: &FDiv,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let n = chain.n_states;
    let t_max = chain.horizon;
    if policy.kernels.len() != chain.kernels.len() || policy.init.len() != n {
        return Err(Error::Shape("policy shape != chain shape".into()));
    }
    let penalty = |p: &[f64], q: &[f64]| -> Result<f64> {
        if tau == 0.0 {
            return Ok(0.0);
        }
        match div_discrete(fd, p, q)? {
            Divergence::Finite(d) => Ok(tau * d),
            Divergence::Infinite => Err(Error::Numeric(
                "policy support exceeds passive support".into(),
            )),
        }
    };
    let mut v = vec![vec![0.0; n]; t_max];
    v[t_max - 1].copy_from_slice(&chain.reward);
    for t in (1..t_max).rev() {
        for s in 0..n {
            let pi_row = &policy.kernels[t - 1][s];
            let exp: f64 = pi_row.iter().zip(&v[t]).map(|(p, val)| p * val).sum();
            v[t - 1][s] = exp - penalty(pi_row, &chain.kernels[t - 1][s])?;
        }
    }
    let exp0: f64 = policy.init.iter().zip(&v[0]).map(|(p, val)| p * val).sum();
    let v0 = exp0 - penalty(&policy.init, &chain.init)?;
    Ok((v, v0))
}

/// Exact soft advantages for every `(t, s, s')` plus the virtual initial
/// step. Entries where the behavior policy puts zero mass are zero.
#[derive(Debug, Clone)]
pub struct ExactAdvantage {
    pub v: Vec<Vec<f64>>,
    pub v0: f64,
    /// `a[t-1][s][s']` for transitions `t = 1..T-1`.
    pub a: Vec<Vec<Vec<f64>>>,
    /// Advantage of the initial draw `x_1 = s'`.
    pub a0: Vec<f64>,
}

pub fn soft_advantage_exact(
    chain: &TabularChain,
    policy: &TabularPolicy,
    tau: f64,
    fd: &FDiv,
) -> Result<ExactAdvantage> {
    let (v, v0) = policy_values(chain, policy, tau, fd)?;
    let n = chain.n_states;
    let row_adv = |pi_row: &[f64],
                   passive_row: &[f64],
                   v_here: f64,
                   v_next: &[f64]|
     -> Result<Vec<f64>> {
        // tau E[f'(zeta) - f(zeta)/zeta] under the behavior row.
        let mut correction = 0.0;
        if tau != 0.0 {
            for (sp, (&p, &q)) in pi_row.iter().zip(passive_row).enumerate() {
                if p == 0.0 {
                    continue;
                }
                if q == 0.0 {
                    return Err(Error::Numeric(
                        "policy support exceeds passive support".into(),
                    ));
                }
                let zeta = p / q;
                correction += p * (fd.fprime(zeta)? - fd.f(zeta)? / zeta);
                let _ = sp;
            }
        }
        let mut out = vec![0.0; n];
        for (sp, (&p, &q)) in pi_row.iter().zip(passive_row).enumerate() {
            if p == 0.0 {
                continue;
            }
            let ratio_term = if tau == 0.0 {
                0.0
            } else {
                tau * fd.fprime(p / q)?
            };
            out[sp] = v_next[sp] - ratio_term - v_here + tau * correction;
        }
        Ok(out)
    };
    let mut a = Vec::with_capacity(chain.horizon - 1);
    for t in 1..chain.horizon {
        let mut at = Vec::with_capacity(n);
        for s in 0..n {
            at.push(row_adv(
                &policy.kernels[t - 1][s],
                &chain.kernels[t - 1][s],
                v[t - 1][s],
                &v[t],
            )?);
        }
        a.push(at);
    }
    let a0 = row_adv(&policy.init, &chain.init, v0, &v[0])?;
    Ok(ExactAdvantage { v, v0, a, a0 })
}

/// Monte Carlo advantage from per-trajectory returns
/// `G = r - tau sum_s f(zeta_s)/zeta_s` (for KL, `f(zeta)/zeta = ln zeta`)
/// minus a baseline shared across the trajectory's steps.
#[derive(Debug, Clone)]
pub struct McAdvantage {
    pub returns: Vec<f64>,
    pub baseline: f64,
    pub adv: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum McBaseline {
    Fixed(f64),
    BatchMean,
}

pub fn soft_advantage_mc(
    stats: &[TrajStats],
    tau: f64,
    fd: &FDiv,
    baseline: McBaseline,
) -> Result<McAdvantage> {
    if stats.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut returns = Vec::with_capacity(stats.len());
    for s in stats {
        let mut penalty = 0.0;
        if tau != 0.0 {
            for &lr in &s.log_ratios {
                let term = match fd {
                    FDiv::Kl => lr,
                    _ => {
                        let zeta = lr.exp();
                        fd.f(zeta)? / zeta
                    }
                };
                penalty += term;
            }
        }
        returns.push(s.reward - tau * penalty);
    }
    let b = match baseline {
        McBaseline::Fixed(v) => v,
        McBaseline::BatchMean => returns.iter().sum::<f64>() / returns.len() as f64,
    };
    let adv = returns.iter().map(|g| g - b).collect();
    Ok(McAdvantage {
        returns,
        baseline: b,
        adv,
    })
}

/// Samples `n` state paths from a tabular policy.
pub fn sample_tabular_paths(
    policy: &TabularPolicy,
    n: usize,
    stream: &Stream,
) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let mut rng = stream.derive(i as u64);
            let mut path = Vec::with_capacity(policy.kernels.len() + 1);
            let mut s = rng.categorical(&policy.init);
            path.push(s);
            for k in &policy.kernels {
                s = rng.categorical(&k[s]);
                path.push(s);
            }
            path
        })
        .collect()
}

/// Stats for sampled tabular paths: reward of the terminal state and exact
/// per-step log ratios `ln(pi / P)`, including the initial draw.
pub fn tabular_traj_stats(
    chain: &TabularChain,
    policy: &TabularPolicy,
    paths: &[Vec<usize>],
) -> Vec<TrajStats> {
    paths
        .iter()
        .map(|path| {
            let mut log_ratios =
                vec![(policy.init[path[0]] / chain.init[path[0]]).ln()];
            for (t, w) in path.windows(2).enumerate() {
                let pi = policy.kernels[t][w[0]][w[1]];
                let p0 = chain.kernels[t][w[0]][w[1]];
                log_ratios.push((pi / p0).ln());
            }
            TrajStats {
                reward: chain.reward[*path.last().unwrap()],
                log_ratios,
            }
        })
        .collect()
}

//! Exact oracles for the linearly-solvable MDP optimality structure on
//! finite chains: Z-recursion, exponentially tilted kernels, terminal
//! marginals, the general-f value recursion, trajectory-level brute force,
//! and analytic Gaussian tilting.
//!
//! All Z arithmetic runs in log space; rewards divided by small temperatures
//! overflow `exp` otherwise.

use crate::error::{Error, Result};
use crate::fdiv::{div_discrete, Divergence, FDiv};
use crate::rng::Stream;

/// Finite-state passive dynamics with a terminal reward.
///
/// States are `0..n_states`; the chain runs over `x_1..x_T` with row-stochastic
/// kernels `P_t` for `t = 1..T-1` and an initial distribution for `x_1`
/// (playing the role of the pretrained reverse process). The initial
/// distribution is treated as a virtual step-0 kernel from a single dummy
/// state so one recursion covers it.
#[derive(Debug, Clone)]
pub struct TabularChain {
    pub n_states: usize,
    pub horizon: usize,
    pub init: Vec<f64>,
    /// `kernels[t-1][s][s']` is `P_t(s, s')`.
    pub kernels: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<f64>,
}

impl TabularChain {
    pub fn new(
        init: Vec<f64>,
        kernels: Vec<Vec<Vec<f64>>>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        let n_states = init.len();
        let horizon = kernels.len() + 1;
        if horizon < 2 {
            return Err(Error::Config("chain needs at least one kernel".into()));
        }
        if reward.len() != n_states {
            return Err(Error::Shape("reward length != state count".into()));
        }
        check_distribution(&init, "initial distribution")?;
        for (t, k) in kernels.iter().enumerate() {
            if k.len() != n_states {
                return Err(Error::Shape(format!("kernel {t} row count mismatch")));
            }
            for row in k {
                if row.len() != n_states {
                    return Err(Error::Shape(format!("kernel {t} col count mismatch")));
                }
                check_distribution(row, "kernel row")?;
            }
        }
        Ok(Self {
            n_states,
            horizon,
            init,
            kernels,
            reward,
        })
    }

    /// The 2-state worked example used throughout the tests.
    pub fn two_state_demo() -> Self {
        Self::new(
            vec![0.5, 0.5],
            vec![vec![vec![0.9, 0.1], vec![0.2, 0.8]]],
            vec![0.0, 1.0],
        )
        .expect("demo chain is valid")
    }

    /// Random row-stochastic chain with rewards in `[0, 1)`.
    pub fn random(n_states: usize, horizon: usize, rng: &mut Stream) -> Self {
        let draw_dist = |rng: &mut Stream| {
            let raw: Vec<f64> = (0..n_states).map(|_| rng.uniform() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let init = draw_dist(rng);
        let kernels = (0..horizon - 1)
            .map(|_| (0..n_states).map(|_| draw_dist(rng)).collect())
            .collect();
        let reward = (0..n_states).map(|_| rng.uniform()).collect();
        Self::new(init, kernels, reward).expect("random chain is valid")
    }

    /// Passive marginal of `x_T` (initial distribution pushed through the
    /// passive kernels).
    pub fn passive_terminal(&self) -> Vec<f64> {
        let mut m = self.init.clone();
        for k in &self.kernels {
            m = push_forward(&m, k);
        }
        m
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| v < 0.0) {
        return Err(Error::Numeric(format!("{what} has a negative entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::Numeric(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn push_forward(m: &[f64], kernel: &[Vec<f64>]) -> Vec<f64> {
    let n = kernel[0].len();
    let mut out = vec![0.0; n];
    for (s, &ms) in m.iter().enumerate() {
        if ms == 0.0 {
            continue;
        }
        for (sp, &k) in kernel[s].iter().enumerate() {
            out[sp] += ms * k;
        }
    }
    out
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-space Z tables: `log_z[t-1][s]` holds `ln Z_t(s)` for `t = 1..=T`, and
/// `log_z0` the scalar `ln Z_0`.
#[derive(Debug, Clone)]
pub struct ZTables {
    pub log_z: Vec<Vec<f64>>,
    pub log_z0: f64,
}

impl ZTables {
    pub fn z(&self, t: usize, s: usize) -> f64 {
        self.log_z[t - 1][s].exp()
    }

    /// `V_t(s) = tau ln Z_t(s)`.
    pub fn value(&self, tau: f64, t: usize, s: usize) -> f64 {
        tau * self.log_z[t - 1][s]
    }
}

/// `Z_T(s) = exp(r(s)/tau)`, `Z_t(s) = sum_s' P_t(s,s') Z_{t+1}(s')`,
/// `Z_0 = sum_s init(s) Z_1(s)`, all in log space.
pub fn z_recursion(chain: &TabularChain, tau: f64) -> Result<ZTables> {
    if tau <= 0.0 {
        return Err(Error::Numeric(format!("tau must be positive: {tau}")));
    }
    let t_max = chain.horizon;
    let mut log_z = vec![vec![0.0; chain.n_states]; t_max];
    for s in 0..chain.n_states {
        log_z[t_max - 1][s] = chain.reward[s] / tau;
    }
    for t in (1..t_max).rev() {
        let kernel = &chain.kernels[t - 1];
        for s in 0..chain.n_states {
            let terms: Vec<f64> = kernel[s]
                .iter()
                .enumerate()
                .map(|(sp, &p)| {
                    if p == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        p.ln() + log_z[t][sp]
                    }
                })
                .collect();
            log_z[t - 1][s] = log_sum_exp(&terms);
        }
    }
    let init_terms: Vec<f64> = chain
        .init
        .iter()
        .enumerate()
        .map(|(s, &p)| {
            if p == 0.0 {
                f64::NEG_INFINITY
            } else {
                p.ln() + log_z[0][s]
            }
        })
        .collect();
    let log_z0 = log_sum_exp(&init_terms);
    Ok(ZTables { log_z, log_z0 })
}

/// Everything the KL oracle knows about a chain.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub z: ZTables,
    pub tau: f64,
    /// Optimal tilted kernels `Q_t(s, s') = P_t(s,s') Z_{t+1}(s') / Z_t(s)`.
    pub tilted: Vec<Vec<Vec<f64>>>,
    /// Tilted initial distribution (the virtual step-0 kernel row).
    pub tilted_init: Vec<f64>,
    /// `ln(Q_t / P_t)` where the passive kernel is positive; this is the
    /// optimal control.
    pub log_tilt: Vec<Vec<Vec<f64>>>,
    /// State marginals `m_t` under the tilted chain, `t = 1..=T`.
    pub marginals: Vec<Vec<f64>>,
    /// Terminal marginal `m_T`.
    pub p_star: Vec<f64>,
}

/// Tilted kernels from the Z tables; rows renormalize exactly.
pub fn optimal_kernel(chain: &TabularChain, tau: f64) -> Result<OracleResult> {
    let z = z_recursion(chain, tau)?;
    let mut tilted = Vec::with_capacity(chain.horizon - 1);
    let mut log_tilt = Vec::with_capacity(chain.horizon - 1);
    for t in 1..chain.horizon {
        let kernel = &chain.kernels[t - 1];
        let mut q_t = vec![vec![0.0; chain.n_states]; chain.n_states];
        let mut u_t = vec![vec![0.0; chain.n_states]; chain.n_states];
        for s in 0..chain.n_states {
            if !z.log_z[t - 1][s].is_finite() {
                return Err(Error::Numeric(format!(
                    "Z_{t}({s}) vanished; cannot tilt"
                )));
            }
            for sp in 0..chain.n_states {
                if kernel[s][sp] == 0.0 {
                    continue;
                }
                let lt = z.log_z[t][sp] - z.log_z[t - 1][s];
                u_t[s][sp] = lt;
                q_t[s][sp] = kernel[s][sp] * lt.exp();
            }
            let row_sum: f64 = q_t[s].iter().sum();
            for v in q_t[s].iter_mut() {
                *v /= row_sum;
            }
        }
        tilted.push(q_t);
        log_tilt.push(u_t);
    }
    let mut tilted_init = vec![0.0; chain.n_states];
    for s in 0..chain.n_states {
        if chain.init[s] > 0.0 {
            tilted_init[s] = chain.init[s] * (z.log_z[0][s] - z.log_z0).exp();
        }
    }
    let norm: f64 = tilted_init.iter().sum();
    for v in tilted_init.iter_mut() {
        *v /= norm;
    }
    let mut marginals = Vec::with_capacity(chain.horizon);
    marginals.push(tilted_init.clone());
    for q_t in &tilted {
        let next = push_forward(marginals.last().unwrap(), q_t);
        marginals.push(next);
    }
    let p_star = marginals.last().unwrap().clone();
    Ok(OracleResult {
        z,
        tau,
        tilted,
        tilted_init,
        log_tilt,
        marginals,
        p_star,
    })
}

/// Terminal marginal by the closed form
/// `p*(s) = p_{0,T}(s) exp(r(s)/tau) / Z_0`.
pub fn terminal_marginal(chain: &TabularChain, tau: f64) -> Result<Vec<f64>> {
    let z = z_recursion(chain, tau)?;
    let passive = chain.passive_terminal();
    let mut p_star: Vec<f64> = passive
        .iter()
        .zip(&chain.reward)
        .map(|(&p, &r)| {
            if p == 0.0 {
                0.0
            } else {
                (p.ln() + r / tau - z.log_z0).exp()
            }
        })
        .collect();
    let norm: f64 = p_star.iter().sum();
    for v in p_star.iter_mut() {
        *v /= norm;
    }
    Ok(p_star)
}

/// Baseline `b` such that `sum_i probs_i [ (f')^{-1}((r_i - b)/tau) ]_+ = 1`,
/// bisected in log space to residual 1e-12 within 200 iterations.
pub fn solve_baseline(fd: &FDiv, rewards: &[f64], probs: &[f64], tau: f64) -> Result<f64> {
    if rewards.len() != probs.len() {
        return Err(Error::Shape("rewards/probs length mismatch".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Numeric(format!("tau must be positive: {tau}")));
    }
    check_distribution(probs, "probs")?;
    let log_total = |b: f64| -> f64 {
        let terms: Vec<f64> = rewards
            .iter()
            .zip(probs)
            .filter(|(_, &p)| p > 0.0)
            .filter_map(|(&r, &p)| fd.log_fprime_inv((r - b) / tau).map(|lw| p.ln() + lw))
            .collect();
        log_sum_exp(&terms)
    };
    let r_lo = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
    let r_hi = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Expand a bracket [lo, hi] with logW(lo) >= 0 >= logW(hi). The weight
    // total is continuous and decreasing in b with range (inf, 0).
    let mut step = tau.max(1e-6);
    let mut lo = r_lo - step;
    let mut hi = r_hi + step;
    for _ in 0..200 {
        if log_total(lo) >= 0.0 {
            break;
        }
        step *= 2.0;
        lo -= step;
    }
    for _ in 0..200 {
        if log_total(hi) <= 0.0 {
            break;
        }
        step *= 2.0;
        hi += step;
    }
    if log_total(lo) < 0.0 || log_total(hi) > 0.0 {
        return Err(Error::Numeric(format!(
            "baseline bisection failed to bracket: lo={lo} hi={hi} logW(lo)={} logW(hi)={}",
            log_total(lo),
            log_total(hi)
        )));
    }
    let mut b = 0.5 * (lo + hi);
    for _ in 0..200 {
        let lw = log_total(b);
        if (lw.exp() - 1.0).abs() <= 1e-12 {
            return Ok(b);
        }
        if lw > 0.0 {
            lo = b;
        } else {
            hi = b;
        }
        b = 0.5 * (lo + hi);
        if (hi - lo) <= f64::EPSILON * (1.0 + b.abs()) {
            break;
        }
    }
    let residual = (log_total(b).exp() - 1.0).abs();
    if residual > 1e-9 {
        return Err(Error::Numeric(format!(
            "baseline bisection residual {residual} after 200 iterations"
        )));
    }
    Ok(b)
}

/// Value tables and tilted kernels under a general f-divergence control cost.
#[derive(Debug, Clone)]
pub struct GeneralFValue {
    /// `v[t-1][s]` for `t = 1..=T`; `v[T-1]` equals the terminal reward.
    pub v: Vec<Vec<f64>>,
    /// Value of the virtual initial state.
    pub v0: f64,
    /// Optimal next-state distributions per `(t, s)`.
    pub kernels: Vec<Vec<Vec<f64>>>,
    /// Optimal initial distribution.
    pub init: Vec<f64>,
}

/// Backward recursion solving, per state, the inner maximization over
/// next-state distributions via its KKT form
/// `Q(s') = P(s,s') [(f')^{-1}((V_{t+1}(s') - b)/tau)]_+` with the scalar `b`
/// bisected so `Q` sums to one; then
/// `V_t(s) = E_Q[V_{t+1}] - tau D_f(Q || P(s,.))`.
pub fn value_general_f(chain: &TabularChain, tau: f64, fd: &FDiv) -> Result<GeneralFValue> {
    if tau <= 0.0 {
        return Err(Error::Numeric(format!("tau must be positive: {tau}")));
    }
    let n = chain.n_states;
    let t_max = chain.horizon;
    let mut v = vec![vec![0.0; n]; t_max];
    v[t_max - 1].copy_from_slice(&chain.reward);

    let solve_row = |passive: &[f64], next_v: &[f64]| -> Result<(Vec<f64>, f64)> {
        let b = solve_baseline(fd, next_v, passive, tau)?;
        let mut q = vec![0.0; n];
        for sp in 0..n {
            if passive[sp] == 0.0 {
                continue;
            }
            q[sp] = passive[sp] * fd.fprime_inv((next_v[sp] - b) / tau);
        }
        let norm: f64 = q.iter().sum();
        for val in q.iter_mut() {
            *val /= norm;
        }
        let expected: f64 = q.iter().zip(next_v).map(|(a, b)| a * b).sum();
        let penalty = match div_discrete(fd, &q, passive)? {
            Divergence::Finite(d) => d,
            Divergence::Infinite => {
                return Err(Error::Numeric(
                    "tilted row escaped the passive support".into(),
                ))
            }
        };
        Ok((q, expected - tau * penalty))
    };

    let mut kernels = vec![vec![vec![0.0; n]; n]; t_max - 1];
    for t in (1..t_max).rev() {
        let passive_kernel = &chain.kernels[t - 1];
        let next_v = v[t].clone();
        for s in 0..n {
            let (q, val) = solve_row(&passive_kernel[s], &next_v)?;
            kernels[t - 1][s] = q;
            v[t - 1][s] = val;
        }
    }
    let (init, v0) = solve_row(&chain.init, &v[0].clone())?;
    Ok(GeneralFValue {
        v,
        v0,
        kernels,
        init,
    })
}

/// Result of enumerating every trajectory under the passive chain.
#[derive(Debug, Clone)]
pub struct TrajectoryBrute {
    /// Baseline making the optimal weights average to one under `P_0`.
    pub baseline: f64,
    /// Weight attached to each terminal state.
    pub weights: Vec<f64>,
    /// Tilted-trajectory terminal marginal.
    pub p_star: Vec<f64>,
    /// `E_{P_0}[w]`; equals one up to bisection tolerance.
    pub mean_weight: f64,
}

/// Enumerates all `S^T` trajectories (guard: at most 1e6), solves the
/// trajectory-level weight `w* = [(f')^{-1}((r(x_T) - b)/tau)]_+` with `b`
/// bisected so `E_{P_0}[w] = 1`, and returns the reweighted terminal
/// marginal.
pub fn trajectory_brute(chain: &TabularChain, tau: f64, fd: &FDiv) -> Result<TrajectoryBrute> {
    let count = (chain.n_states as f64).powi(chain.horizon as i32);
    if count > 1e6 {
        return Err(Error::EnumerationGuard(format!(
            "{}^{} trajectories",
            chain.n_states, chain.horizon
        )));
    }
    let n = chain.n_states;
    let t_max = chain.horizon;
    // Terminal mass per state, accumulated path by path.
    let mut terminal_mass = vec![0.0; n];
    let mut path = vec![0usize; t_max];
    loop {
        let mut prob = chain.init[path[0]];
        for t in 1..t_max {
            prob *= chain.kernels[t - 1][path[t - 1]][path[t]];
            if prob == 0.0 {
                break;
            }
        }
        terminal_mass[path[t_max - 1]] += prob;
        // Odometer increment.
        let mut i = 0;
        loop {
            path[i] += 1;
            if path[i] < n {
                break;
            }
            path[i] = 0;
            i += 1;
            if i == t_max {
                break;
            }
        }
        if i == t_max {
            break;
        }
    }
    let baseline = solve_baseline(fd, &chain.reward, &terminal_mass, tau)?;
    let weights: Vec<f64> = chain
        .reward
        .iter()
        .map(|&r| fd.fprime_inv((r - baseline) / tau).max(0.0))
        .collect();
    let mean_weight: f64 = terminal_mass
        .iter()
        .zip(&weights)
        .map(|(m, w)| m * w)
        .sum();
    let mut p_star: Vec<f64> = terminal_mass
        .iter()
        .zip(&weights)
        .map(|(m, w)| m * w)
        .collect();
    let norm: f64 = p_star.iter().sum();
    for v in p_star.iter_mut() {
        *v /= norm;
    }
    Ok(TrajectoryBrute {
        baseline,
        weights,
        p_star,
        mean_weight,
    })
}

/// Diagonal Gaussian prior with a reward that keeps the tilt Gaussian.
#[derive(Debug, Clone)]
pub struct GaussTiltSpec {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub reward: GaussReward,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub enum GaussReward {
    /// `r(x) = a^T x`
    Linear { a: Vec<f64> },
    /// `r(x) = -kappa ||x||^2 / 2`
    Quadratic { kappa: f64 },
}

/// Mean and variance of `p*(x) ∝ N(x|m, s2) exp(r(x)/tau)`, per dimension.
pub fn gauss_tilt(spec: &GaussTiltSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    if spec.tau <= 0.0 {
        return Err(Error::Numeric("tau must be positive".into()));
    }
    if spec.mean.len() != spec.var.len() {
        return Err(Error::Shape("mean/var length mismatch".into()));
    }
    if spec.var.iter().any(|&v| v <= 0.0) {
        return Err(Error::Numeric("variance must be positive".into()));
    }
    match &spec.reward {
        GaussReward::Linear { a } => {
            if a.len() != spec.mean.len() {
                return Err(Error::Shape("reward direction length mismatch".into()));
            }
            let mean = spec
                .mean
                .iter()
                .zip(&spec.var)
                .zip(a)
                .map(|((m, s2), ai)| m + s2 * ai / spec.tau)
                .collect();
            Ok((mean, spec.var.clone()))
        }
        GaussReward::Quadratic { kappa } => {
            for &s2 in &spec.var {
                if 1.0 + s2 * kappa / spec.tau <= 0.0 {
                    return Err(Error::Numeric(
                        "quadratic tilt is not normalizable: 1 + s2 kappa / tau <= 0".into(),
                    ));
                }
            }
            let shrink: Vec<f64> = spec
                .var
                .iter()
                .map(|s2| 1.0 / (1.0 + s2 * kappa / spec.tau))
                .collect();
            let mean = spec
                .mean
                .iter()
                .zip(&shrink)
                .map(|(m, c)| m * c)
                .collect();
            let var = spec.var.iter().zip(&shrink).map(|(s2, c)| s2 * c).collect();
            Ok((mean, var))
        }
    }
}

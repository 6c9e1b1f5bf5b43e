//! Evaluation: paired win rates with Wilson intervals, Monte Carlo KL to the
//! pretrained model, distances to analytic targets, and guidance sweeps.

use serde::Serialize;

use crate::controller::ComposedModel;
use crate::diffusion::{ancestral_sample, EpsModel};
use crate::error::{Error, Result};
use crate::lsmdp::{optimal_kernel, terminal_marginal, TabularChain};
use crate::rlft::{rollout, sample_tabular_paths, RewardSpec, TabularPolicy};
use crate::rng::Stream;

/// One row of the eval CSV; schema
/// `lambda_model,win_rate,wr_ci,mean_reward_ft,mean_reward_pre,mc_kl,target_distance,n`.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub lambda_model: f64,
    pub win_rate: f64,
    pub wr_ci: f64,
    pub mean_reward_ft: f64,
    pub mean_reward_pre: f64,
    pub mc_kl: f64,
    pub target_distance: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Copy of the row with the best win rate; emitted last in the CSV.
    pub best: EvalRow,
}

/// Wilson 95% half-width for a proportion estimated from `n` pairs.
pub fn wilson_halfwidth(p_hat: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    let z = 1.959963984540054_f64;
    let nf = n as f64;
    let denom = 1.0 + z * z / nf;
    z / denom * (p_hat * (1.0 - p_hat) / nf + z * z / (4.0 * nf * nf)).sqrt()
}

pub struct EvalSettings {
    pub n_samples: usize,
    pub n_kl: usize,
    pub lambda_sweep: Vec<f64>,
    pub lambda_cfg: f64,
    pub cond_probs: Vec<f64>,
    /// Analytic 1-d target `(mean, var)` when one exists; enables the
    /// Wasserstein-1 column.
    pub target: Option<(f64, f64)>,
}

/// Paired evaluation of a fine-tuned model against its own frozen core.
///
/// Pairs share condition and noise stream, so a model evaluated against
/// itself ties on every pair and scores exactly 0.5 (ties count half).
pub fn evaluate(
    finetuned: &ComposedModel,
    reward: &RewardSpec,
    settings: &EvalSettings,
    stream: &Stream,
) -> Result<EvalReport> {
    if settings.lambda_sweep.is_empty() {
        return Err(Error::Config("lambda_sweep must be nonempty".into()));
    }
    let sched = finetuned.sched.clone();
    let pretrained = finetuned.pretrained();
    let mut rows = Vec::with_capacity(settings.lambda_sweep.len());
    for &lam in &settings.lambda_sweep {
        let mut model = finetuned.clone();
        model.lambda_model = lam;
        let mut wins = 0.0;
        let mut sum_ft = 0.0;
        let mut sum_pre = 0.0;
        for i in 0..settings.n_samples {
            let pair = stream.derive(i as u64);
            let mut cond_rng = pair.derive(0);
            let c = cond_rng.categorical(&settings.cond_probs);
            let noise = pair.derive(1);
            let (x_ft, _) = ancestral_sample(
                &model,
                &sched,
                Some(c),
                settings.lambda_cfg,
                &mut noise.clone(),
                false,
            )?;
            let (x_pre, _) = ancestral_sample(
                pretrained,
                &sched,
                Some(c),
                settings.lambda_cfg,
                &mut noise.clone(),
                false,
            )?;
            let r_ft = reward.eval(&x_ft, Some(c));
            let r_pre = reward.eval(&x_pre, Some(c));
            sum_ft += r_ft;
            sum_pre += r_pre;
            if r_ft > r_pre {
                wins += 1.0;
            } else if r_ft == r_pre {
                wins += 0.5;
            }
        }
        let n = settings.n_samples;
        let win_rate = wins / n as f64;
        // Monte Carlo KL(finetuned || pretrained) from unguided rollouts.
        let mc_kl = if settings.n_kl > 0 {
            rollout(
                &model,
                reward,
                &settings.cond_probs,
                settings.n_kl,
                0.0,
                &stream.derive(u64::MAX - 1),
            )?
            .mean_kl()
        } else {
            f64::NAN
        };
        let target_distance = match settings.target {
            Some((mean, var)) if model.data_dim() == 1 => {
                let mut ft_samples = Vec::with_capacity(n);
                let mut target_samples = Vec::with_capacity(n);
                let base = stream.derive(u64::MAX - 2);
                for i in 0..n {
                    let pair = base.derive(i as u64);
                    let mut cond_rng = pair.derive(0);
                    let c = cond_rng.categorical(&settings.cond_probs);
                    let mut noise = pair.derive(1);
                    let (x, _) = ancestral_sample(
                        &model,
                        &sched,
                        Some(c),
                        settings.lambda_cfg,
                        &mut noise,
                        false,
                    )?;
                    ft_samples.push(x[0]);
                    let mut trng = pair.derive(2);
                    target_samples.push(mean + var.sqrt() * trng.normal());
                }
                wasserstein1_sorted(&mut ft_samples, &mut target_samples)
            }
            _ => f64::NAN,
        };
        rows.push(EvalRow {
            lambda_model: lam,
            win_rate,
            wr_ci: wilson_halfwidth(win_rate, n),
            mean_reward_ft: sum_ft / n as f64,
            mean_reward_pre: sum_pre / n as f64,
            mc_kl,
            target_distance,
            n,
        });
    }
    let best = rows
        .iter()
        .cloned()
        .max_by(|a, b| a.win_rate.total_cmp(&b.win_rate))
        .expect("at least one row");
    Ok(EvalReport { rows, best })
}

/// Wasserstein-1 between two equal-size empirical samples via sorting.
pub fn wasserstein1_sorted(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Total variation between two distributions on a shared finite support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Tabular analogue of [`evaluate`]: samples the exactly tilted chain against
/// the passive one and reports the terminal-count TV to the closed-form
/// optimal marginal as the target distance.
pub fn evaluate_tabular(
    chain: &TabularChain,
    tau: f64,
    n: usize,
    stream: &Stream,
) -> Result<EvalRow> {
    let oracle = optimal_kernel(chain, tau)?;
    let p_star = terminal_marginal(chain, tau)?;
    let tilted = TabularPolicy {
        init: oracle.tilted_init.clone(),
        kernels: oracle.tilted.clone(),
    };
    let passive = TabularPolicy::passive(chain);
    let paths_t = sample_tabular_paths(&tilted, n, &stream.derive(1));
    let paths_p = sample_tabular_paths(&passive, n, &stream.derive(2));
    let mut wins = 0.0;
    let mut sum_t = 0.0;
    let mut sum_p = 0.0;
    let mut counts = vec![0usize; chain.n_states];
    let mut kl = 0.0;
    for (pt, pp) in paths_t.iter().zip(&paths_p) {
        let rt = chain.reward[*pt.last().unwrap()];
        let rp = chain.reward[*pp.last().unwrap()];
        sum_t += rt;
        sum_p += rp;
        if rt > rp {
            wins += 1.0;
        } else if rt == rp {
            wins += 0.5;
        }
        counts[*pt.last().unwrap()] += 1;
        // Exact per-path log ratio of tilted vs passive dynamics.
        kl += (tilted.init[pt[0]] / chain.init[pt[0]]).ln();
        for (t, w) in pt.windows(2).enumerate() {
            kl += (tilted.kernels[t][w[0]][w[1]] / chain.kernels[t][w[0]][w[1]]).ln();
        }
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let win_rate = wins / n as f64;
    Ok(EvalRow {
        lambda_model: f64::NAN,
        win_rate,
        wr_ci: wilson_halfwidth(win_rate, n),
        mean_reward_ft: sum_t / n as f64,
        mean_reward_pre: sum_p / n as f64,
        mc_kl: kl / n as f64,
        target_distance: total_variation(&empirical, &p_star),
        n,
    })
}

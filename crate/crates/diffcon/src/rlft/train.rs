//! Training loops: pretraining, SFT, reward-weighted regression, policy
//! gradient, and PPO.

use std::time::Instant;

use crate::controller::{ComposeMode, ComposedModel};
use crate::diffusion::{sm_loss, DataSpec, EpsModel, ScoreModel};
use crate::error::{Error, Result};
use crate::fdiv::FDiv;
use crate::rlft::advantage::{soft_advantage_mc, McBaseline};
use crate::rlft::pg::{policy_gradient_neural, ppo_loss};
use crate::rlft::rwl::{rwl_loss, rwl_weights, ResolvedBaseline, Weighting};
use crate::rlft::trajectory::{rollout, BaselineMode, RewardSpec, RolloutBatch};
use crate::numkit::AdamState;
use crate::rng::Stream;
use crate::schedule::NoiseSchedule;

/// One training-log line; the CSV schema is
/// `iter,loss,mean_reward,mean_kl,wallclock_ms`.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

/// Wallclock source. The deterministic clock reports zero so that logs are
/// byte-identical across runs; opt into real timing via the CLI env switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Deterministic,
    Real,
}

struct Ticker {
    clock: Clock,
    start: Instant,
}

impl Ticker {
    fn new(clock: Clock) -> Self {
        Self {
            clock,
            start: Instant::now(),
        }
    }

    fn ms(&self) -> u64 {
        match self.clock {
            Clock::Deterministic => 0,
            Clock::Real => self.start.elapsed().as_millis() as u64,
        }
    }
}

/// Score-matching pretraining over a synthetic data spec.
pub fn pretrain_score_model(
    model: &mut ScoreModel,
    sched: &NoiseSchedule,
    data: &DataSpec,
    iterations: usize,
    batch_size: usize,
    lr: f64,
    p_drop: f64,
    stream: &Stream,
    clock: Clock,
    log_every: usize,
) -> Result<TrainLog> {
    data.validate()?;
    let ticker = Ticker::new(clock);
    let mut adam = AdamState::new(model.trainable_len(), lr);
    let mut log = TrainLog::default();
    for iter in 0..iterations {
        let mut data_rng = stream.derive(2 * iter as u64);
        let mut loss_rng = stream.derive(2 * iter as u64 + 1);
        let batch: Vec<(Vec<f64>, usize)> =
            (0..batch_size).map(|_| data.sample(&mut data_rng)).collect();
        let (loss, grads) = sm_loss(model, sched, &batch, p_drop, &mut loss_rng)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("pretraining diverged at {iter}")));
        }
        let mut params = model.trainable_params();
        adam.step(&mut params, &grads)?;
        model.set_trainable_params(&params)?;
        if iter % log_every == 0 || iter + 1 == iterations {
            log.rows.push(LogRow {
                iter,
                loss,
                mean_reward: f64::NAN,
                mean_kl: f64::NAN,
                wallclock_ms: ticker.ms(),
            });
        }
    }
    Ok(log)
}

/// Supervised fine-tuning: an Adam loop over the score-matching loss on
/// target samples, with condition dropout. Zero steps leave the model
/// untouched. The optimizer is passed in so callers can set per-component
/// rates.
pub fn sft_finetune<M: EpsModel>(
    model: &mut M,
    sched: &NoiseSchedule,
    targets: &[(Vec<f64>, usize)],
    steps: usize,
    batch_size: usize,
    adam: &mut AdamState,
    p_drop: f64,
    stream: &Stream,
    clock: Clock,
    log_every: usize,
) -> Result<TrainLog> {
    if targets.is_empty() && steps > 0 {
        return Err(Error::Config("no target samples".into()));
    }
    let ticker = Ticker::new(clock);
    let mut log = TrainLog::default();
    for iter in 0..steps {
        let mut pick_rng = stream.derive(2 * iter as u64);
        let mut loss_rng = stream.derive(2 * iter as u64 + 1);
        let batch: Vec<(Vec<f64>, usize)> = (0..batch_size)
            .map(|_| targets[pick_rng.below(targets.len())].clone())
            .collect();
        let (loss, grads) = sm_loss(model, sched, &batch, p_drop, &mut loss_rng)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("sft diverged at {iter}")));
        }
        let mut params = model.trainable_params();
        adam.step(&mut params, &grads)?;
        model.set_trainable_params(&params)?;
        if iter % log_every == 0 || iter + 1 == steps {
            log.rows.push(LogRow {
                iter,
                loss,
                mean_reward: f64::NAN,
                mean_kl: f64::NAN,
                wallclock_ms: ticker.ms(),
            });
        }
    }
    Ok(log)
}

/// Where reward-weighted regression draws its samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    /// From the frozen pretrained model (the setting the minimizer-
    /// preservation guarantee is stated for).
    Teacher,
    /// From the current policy.
    Online,
}

#[derive(Debug, Clone)]
pub struct RwlConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Side-network learning rate (and the single rate when no adapters).
    pub lr: f64,
    /// LoRA learning rate; falls back to `lr` when absent.
    pub lr_lora: Option<f64>,
    pub tau: f64,
    pub weighting: Weighting,
    pub baseline: BaselineMode,
    pub sample_every: usize,
    pub source: SampleSource,
    /// Reuse the same (t, xi) draws for every gradient step within one
    /// sampling round.
    pub reuse_noise: bool,
    pub rollout_lambda_cfg: f64,
    pub log_every: usize,
}

fn pretrained_view(model: &ComposedModel) -> ComposedModel {
    let mut view = model.clone();
    view.mode = ComposeMode::CoreOnly;
    view.side = None;
    view.lora = None;
    view
}

/// Reward-weighted regression loop with online or teacher sampling.
pub fn rwl_finetune(
    model: &mut ComposedModel,
    reward: &RewardSpec,
    cond_probs: &[f64],
    cfg: &RwlConfig,
    stream: &Stream,
    clock: Clock,
) -> Result<TrainLog> {
    if cfg.sample_every == 0 {
        return Err(Error::Config("sample_every must be >= 1".into()));
    }
    let ticker = Ticker::new(clock);
    let mut adam =
        AdamState::with_rates(model.trainable_rates(cfg.lr_lora.unwrap_or(cfg.lr), cfg.lr));
    let mut log = TrainLog::default();
    let mut frozen_baseline: Option<f64> = None;
    let mut batch: Option<RolloutBatch> = None;
    for iter in 0..cfg.iterations {
        let round = iter / cfg.sample_every;
        if iter % cfg.sample_every == 0 {
            let sample_stream = stream.derive(1_000_000 + round as u64);
            let behavior = match cfg.source {
                SampleSource::Teacher => pretrained_view(model),
                SampleSource::Online => model.clone(),
            };
            batch = Some(rollout(
                &behavior,
                reward,
                cond_probs,
                cfg.batch_size,
                cfg.rollout_lambda_cfg,
                &sample_stream,
            )?);
        }
        let batch_ref = batch.as_ref().expect("batch populated at round start");
        let rewards: Vec<f64> = batch_ref.trajectories.iter().map(|t| t.reward).collect();
        if frozen_baseline.is_none() && reward.baseline == BaselineMode::FirstBatchMean {
            frozen_baseline = Some(rewards.iter().sum::<f64>() / rewards.len() as f64);
        }
        let resolved = match &reward.baseline {
            BaselineMode::Fixed(b) => ResolvedBaseline::Fixed(*b),
            BaselineMode::FirstBatchMean => {
                ResolvedBaseline::Fixed(frozen_baseline.expect("frozen above"))
            }
            BaselineMode::BatchMean => ResolvedBaseline::BatchMean,
            BaselineMode::BatchMax => ResolvedBaseline::BatchMax,
            BaselineMode::ExactBisection => {
                return Err(Error::Config(
                    "exact-bisection baseline needs enumerable terminal probabilities".into(),
                ))
            }
        };
        let weights = rwl_weights(&rewards, &cfg.weighting, cfg.tau, &resolved)?;
        let samples: Vec<(Vec<f64>, usize)> = batch_ref
            .trajectories
            .iter()
            .map(|t| (t.states.last().unwrap().clone(), t.condition))
            .collect();
        let noise_tag = if cfg.reuse_noise { round } else { iter } as u64;
        let mut loss_rng = stream.derive(2_000_000 + noise_tag);
        let sched = model.sched.clone();
        let (loss, grads) = rwl_loss(model, &sched, &samples, &weights, &mut loss_rng)?;
        let mut params = model.trainable_params();
        adam.step(&mut params, &grads)?;
        model.set_trainable_params(&params)?;
        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log.rows.push(LogRow {
                iter,
                loss,
                mean_reward: batch_ref.mean_reward(),
                mean_kl: match cfg.source {
                    SampleSource::Online => batch_ref.mean_kl(),
                    SampleSource::Teacher => f64::NAN,
                },
                wallclock_ms: ticker.ms(),
            });
        }
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct PolicyRlConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Side-network learning rate (and the single rate when no adapters).
    pub lr: f64,
    /// LoRA learning rate; falls back to `lr` when absent.
    pub lr_lora: Option<f64>,
    pub tau: f64,
    pub fd: FDiv,
    pub clip_delta: f64,
    /// Gradient steps on each collected batch (PPO only; plain policy
    /// gradient always takes one).
    pub ppo_epochs: usize,
    pub rollout_lambda_cfg: f64,
    pub log_every: usize,
}

/// KL-or-f-regularized policy gradient loop (one step per fresh batch).
pub fn pg_finetune(
    model: &mut ComposedModel,
    reward: &RewardSpec,
    cond_probs: &[f64],
    cfg: &PolicyRlConfig,
    stream: &Stream,
    clock: Clock,
) -> Result<TrainLog> {
    let ticker = Ticker::new(clock);
    let mut adam =
        AdamState::with_rates(model.trainable_rates(cfg.lr_lora.unwrap_or(cfg.lr), cfg.lr));
    let mut log = TrainLog::default();
    for iter in 0..cfg.iterations {
        let batch = rollout(
            model,
            reward,
            cond_probs,
            cfg.batch_size,
            cfg.rollout_lambda_cfg,
            &stream.derive(iter as u64),
        )?;
        let adv = soft_advantage_mc(&batch.stats(), cfg.tau, &cfg.fd, McBaseline::BatchMean)?;
        let ascent = policy_gradient_neural(model, &batch, &adv.adv, cfg.rollout_lambda_cfg)?;
        let descent: Vec<f64> = ascent.iter().map(|g| -g).collect();
        let mut params = model.trainable_params();
        adam.step(&mut params, &descent)?;
        model.set_trainable_params(&params)?;
        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log.rows.push(LogRow {
                iter,
                loss: -adv.returns.iter().sum::<f64>() / adv.returns.len() as f64,
                mean_reward: batch.mean_reward(),
                mean_kl: batch.mean_kl(),
                wallclock_ms: ticker.ms(),
            });
        }
    }
    Ok(log)
}

/// Clipped-surrogate PPO loop.
pub fn ppo_finetune(
    model: &mut ComposedModel,
    reward: &RewardSpec,
    cond_probs: &[f64],
    cfg: &PolicyRlConfig,
    stream: &Stream,
    clock: Clock,
) -> Result<TrainLog> {
    let ticker = Ticker::new(clock);
    let mut adam =
        AdamState::with_rates(model.trainable_rates(cfg.lr_lora.unwrap_or(cfg.lr), cfg.lr));
    let mut log = TrainLog::default();
    for iter in 0..cfg.iterations {
        let batch = rollout(
            model,
            reward,
            cond_probs,
            cfg.batch_size,
            cfg.rollout_lambda_cfg,
            &stream.derive(iter as u64),
        )?;
        let adv = soft_advantage_mc(&batch.stats(), cfg.tau, &cfg.fd, McBaseline::BatchMean)?;
        let mut last_loss = 0.0;
        for _ in 0..cfg.ppo_epochs.max(1) {
            let (loss, grads) =
                ppo_loss(model, &batch, &adv.adv, cfg.clip_delta, cfg.rollout_lambda_cfg)?;
            last_loss = loss;
            let mut params = model.trainable_params();
            adam.step(&mut params, &grads)?;
            model.set_trainable_params(&params)?;
        }
        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log.rows.push(LogRow {
                iter,
                loss: last_loss,
                mean_reward: batch.mean_reward(),
                mean_kl: batch.mean_kl(),
                wallclock_ms: ticker.ms(),
            });
        }
    }
    Ok(log)
}

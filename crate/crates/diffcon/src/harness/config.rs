//! Experiment configuration: a flat `key = value` format with sections
//! `[pretrain]`, `[finetune]`, `[eval]`, and `[oracle]`.
//!
//! Unknown keys are rejected with their line number. An empty file yields
//! the documented defaults. Fields that depend on the chosen algorithm or
//! parameterization (temperature, divergence, iteration budget, LoRA rank
//! and learning rate) resolve at parse time, so serialization is canonical
//! and `parse(serialize(parse(f))) == parse(f)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::controller::ComposeMode;
use crate::diffusion::{DataGenerator, DataSpec};
use crate::error::{Error, Result};
use crate::fdiv::FDiv;
use crate::lsmdp::{GaussReward, GaussTiltSpec, TabularChain};
use crate::rlft::{BaselineMode, RewardForm, RewardSpec, SampleSource, Weighting};
use crate::rng::Stream;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Sft,
    Rwl,
    Pg,
    Ppo,
}

impl Algorithm {
    fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "sft" => Algorithm::Sft,
            "rwl" => Algorithm::Rwl,
            "pg" => Algorithm::Pg,
            "ppo" => Algorithm::Ppo,
            other => return Err(Error::Config(format!("unknown algorithm {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Sft => "sft",
            Algorithm::Rwl => "rwl",
            Algorithm::Pg => "pg",
            Algorithm::Ppo => "ppo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleSpec {
    Constant { beta: f64 },
    Linear { beta_min: f64, beta_max: f64 },
}

impl ScheduleSpec {
    fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["constant", b] => Ok(ScheduleSpec::Constant {
                beta: parse_f64(b)?,
            }),
            ["linear", lo, hi] => Ok(ScheduleSpec::Linear {
                beta_min: parse_f64(lo)?,
                beta_max: parse_f64(hi)?,
            }),
            _ => Err(Error::Config(format!(
                "bad schedule {s:?}; expected constant:<b> or linear:<min>:<max>"
            ))),
        }
    }

    fn render(&self) -> String {
        match self {
            ScheduleSpec::Constant { beta } => format!("constant:{beta}"),
            ScheduleSpec::Linear { beta_min, beta_max } => {
                format!("linear:{beta_min}:{beta_max}")
            }
        }
    }

    pub fn build(&self, t_horizon: usize) -> Result<NoiseSchedule> {
        match self {
            ScheduleSpec::Constant { beta } => NoiseSchedule::constant(t_horizon, *beta),
            ScheduleSpec::Linear { beta_min, beta_max } => {
                NoiseSchedule::linear(t_horizon, *beta_min, *beta_max)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    StdNormal,
    CondMixture,
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub t_horizon: usize,
    pub schedule: ScheduleSpec,
    pub data: DataKind,
    pub dim: usize,
    pub data_means: Vec<f64>,
    pub data_vars: Vec<f64>,
    pub cond_probs: Vec<f64>,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_drop: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            t_horizon: 50,
            schedule: ScheduleSpec::Linear {
                beta_min: 1e-4,
                beta_max: 0.02,
            },
            data: DataKind::CondMixture,
            dim: 1,
            data_means: vec![-1.0, 1.0],
            data_vars: vec![0.25, 0.25],
            cond_probs: vec![0.5, 0.5],
            hidden: vec![64, 64],
            embed_dim: 8,
            cond_dim: 4,
            iterations: 20_000,
            batch_size: 128,
            lr: 1e-3,
            p_drop: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build(self.t_horizon)
    }

    pub fn build_data_spec(&self) -> Result<DataSpec> {
        let spec = match self.data {
            DataKind::StdNormal => DataSpec {
                dim: self.dim,
                generator: DataGenerator::Gaussian {
                    mean: vec![0.0; self.dim],
                    var: vec![1.0; self.dim],
                },
                cond_probs: vec![1.0],
            },
            DataKind::CondMixture => {
                let per_cond = |vals: &[f64]| -> Vec<Vec<f64>> {
                    vals.iter().map(|&v| vec![v; self.dim]).collect()
                };
                DataSpec {
                    dim: self.dim,
                    generator: DataGenerator::ConditionalMixture {
                        means: per_cond(&self.data_means),
                        vars: per_cond(&self.data_vars),
                    },
                    cond_probs: self.cond_probs.clone(),
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_conditions(&self) -> usize {
        match self.data {
            DataKind::StdNormal => 1,
            DataKind::CondMixture => self.cond_probs.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SftTarget {
    /// Samples drawn from the Gaussian tilt of the pretraining prior by the
    /// configured reward.
    Tilted,
    /// The pretraining data itself (the fixed-point check).
    PretrainData,
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub algorithm: Algorithm,
    pub parameterization: ComposeMode,
    pub tau: f64,
    pub fdiv_name: String,
    pub weighting: Option<Weighting>,
    pub lambda_cfg: f64,
    pub lambda_model: f64,
    pub p_drop: f64,
    pub clip_delta: f64,
    pub lr_side: f64,
    pub lr_lora: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub sample_every: usize,
    pub ppo_epochs: usize,
    pub reward: RewardConfig,
    pub baseline: BaselineMode,
    pub rwl_sampling: SampleSource,
    pub reuse_noise: bool,
    pub rollout_cfg: bool,
    pub side_hidden: Vec<usize>,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub sft_target: SftTarget,
    pub sft_samples: usize,
}

impl FinetuneConfig {
    fn defaults_for(algorithm: Algorithm, parameterization: ComposeMode) -> Self {
        let tau = match algorithm {
            Algorithm::Rwl => 5e-4,
            _ => 1e-4,
        };
        let fdiv_name = match algorithm {
            Algorithm::Rwl => format!("alpha:{}", 1.0 + tau),
            _ => "kl".to_string(),
        };
        let iterations = match algorithm {
            Algorithm::Sft => 1000,
            Algorithm::Rwl | Algorithm::Pg => 2000,
            Algorithm::Ppo => 2400,
        };
        let batch_size = match algorithm {
            Algorithm::Sft => 128,
            _ => 64,
        };
        let lr_lora = match algorithm {
            Algorithm::Sft => 1e-5,
            _ => 1e-4,
        };
        let lora_rank = match parameterization {
            ComposeMode::LoraOnly => 16,
            _ => 4,
        };
        Self {
            algorithm,
            parameterization,
            tau,
            fdiv_name,
            weighting: None,
            lambda_cfg: 7.5,
            lambda_model: 1.0,
            p_drop: 0.1,
            clip_delta: 0.2,
            lr_side: 1e-5,
            lr_lora,
            batch_size,
            iterations,
            sample_every: 2,
            ppo_epochs: 4,
            reward: RewardConfig::Region {
                center: 1.0,
                radius: 0.5,
                high: 1.0,
                low: 0.0,
            },
            baseline: BaselineMode::FirstBatchMean,
            rwl_sampling: SampleSource::Online,
            reuse_noise: false,
            rollout_cfg: false,
            side_hidden: vec![32, 32],
            lora_rank,
            lora_scale: 1.0,
            sft_target: SftTarget::Tilted,
            sft_samples: 4096,
        }
    }

    pub fn fdiv(&self) -> Result<FDiv> {
        FDiv::from_name(&self.fdiv_name)
    }

    /// The weighting in effect: explicit choice, else the one implied by the
    /// divergence.
    pub fn effective_weighting(&self) -> Result<Weighting> {
        match &self.weighting {
            Some(w) => Ok(w.clone()),
            None => Weighting::from_fdiv(&self.fdiv()?),
        }
    }

    pub fn reward_spec(&self, dim: usize) -> Result<RewardSpec> {
        let spec = RewardSpec {
            form: self.reward.form(dim),
            tau: self.tau,
            baseline: self.baseline.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Guidance strength used while collecting rollouts: zero unless the
    /// `rollout_cfg` flag opts into guided rollouts.
    pub fn rollout_lambda(&self) -> f64 {
        if self.rollout_cfg {
            self.lambda_cfg
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardConfig {
    Linear { a: f64 },
    Quadratic { kappa: f64 },
    Region { center: f64, radius: f64, high: f64, low: f64 },
}

impl RewardConfig {
    fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["linear", a] => Ok(RewardConfig::Linear { a: parse_f64(a)? }),
            ["quadratic", k] => Ok(RewardConfig::Quadratic {
                kappa: parse_f64(k)?,
            }),
            ["region", c, r, hi, lo] => Ok(RewardConfig::Region {
                center: parse_f64(c)?,
                radius: parse_f64(r)?,
                high: parse_f64(hi)?,
                low: parse_f64(lo)?,
            }),
            _ => Err(Error::Config(format!(
                "bad reward {s:?}; expected linear:<a>, quadratic:<k>, or region:<c>:<r>:<hi>:<lo>"
            ))),
        }
    }

    fn render(&self) -> String {
        match self {
            RewardConfig::Linear { a } => format!("linear:{a}"),
            RewardConfig::Quadratic { kappa } => format!("quadratic:{kappa}"),
            RewardConfig::Region {
                center,
                radius,
                high,
                low,
            } => format!("region:{center}:{radius}:{high}:{low}"),
        }
    }

    /// Broadcasts scalar parameters across the data dimension.
    pub fn form(&self, dim: usize) -> RewardForm {
        match self {
            RewardConfig::Linear { a } => RewardForm::Linear { a: vec![*a; dim] },
            RewardConfig::Quadratic { kappa } => RewardForm::Quadratic { kappa: *kappa },
            RewardConfig::Region {
                center,
                radius,
                high,
                low,
            } => RewardForm::Region {
                center: vec![*center; dim],
                radius: *radius,
                high: *high,
                low: *low,
            },
        }
    }

    /// Gaussian-tilt reward when one exists (linear / quadratic only).
    pub fn gauss_reward(&self, dim: usize) -> Option<GaussReward> {
        match self {
            RewardConfig::Linear { a } => Some(GaussReward::Linear { a: vec![*a; dim] }),
            RewardConfig::Quadratic { kappa } => Some(GaussReward::Quadratic { kappa: *kappa }),
            RewardConfig::Region { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub n_kl: usize,
    pub lambda_sweep: Vec<f64>,
    pub tabular: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_kl: 500,
            lambda_sweep: vec![1.0],
            tabular: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChainSpec {
    Demo2,
    Random { n_states: usize, horizon: usize },
}

impl ChainSpec {
    fn parse(s: &str) -> Result<Self> {
        if s == "demo2" {
            return Ok(ChainSpec::Demo2);
        }
        let parts: Vec<&str> = s.split(':').collect();
        if let ["random", ns, h] = parts.as_slice() {
            return Ok(ChainSpec::Random {
                n_states: parse_usize(ns)?,
                horizon: parse_usize(h)?,
            });
        }
        Err(Error::Config(format!(
            "bad chain {s:?}; expected demo2 or random:<states>:<horizon>"
        )))
    }

    fn render(&self) -> String {
        match self {
            ChainSpec::Demo2 => "demo2".into(),
            ChainSpec::Random { n_states, horizon } => format!("random:{n_states}:{horizon}"),
        }
    }

    pub fn build(&self, seed: u64) -> TabularChain {
        match self {
            ChainSpec::Demo2 => TabularChain::two_state_demo(),
            ChainSpec::Random { n_states, horizon } => {
                TabularChain::random(*n_states, *horizon, &mut Stream::from_seed(seed))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub chain: ChainSpec,
    pub tau: f64,
    pub fdiv_name: String,
    pub gauss_mean: f64,
    pub gauss_var: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            chain: ChainSpec::Demo2,
            tau: 1.0,
            fdiv_name: "kl".into(),
            gauss_mean: 0.0,
            gauss_var: 1.0,
        }
    }
}

impl OracleConfig {
    pub fn fdiv(&self) -> Result<FDiv> {
        FDiv::from_name(&self.fdiv_name)
    }

    pub fn gauss_spec(&self, reward: &RewardConfig) -> Option<GaussTiltSpec> {
        reward.gauss_reward(1).map(|r| GaussTiltSpec {
            mean: vec![self.gauss_mean],
            var: vec![self.gauss_var],
            reward: r,
            tau: self.tau,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub oracle: OracleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::defaults_for(Algorithm::Ppo, ComposeMode::SideNet),
            eval: EvalConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad number {s:?}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad integer {s:?}")))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("bad boolean {other:?}"))),
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(parse_f64).collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(parse_usize).collect()
}

fn render_list<T: std::fmt::Display>(vals: &[T]) -> String {
    vals.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Raw lines bucketed by section, remembering line numbers for errors.
struct RawSection {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawSection {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    fn finish(self, section: &str) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Parse {
                line,
                msg: format!("unknown key {key:?} in section [{section}]"),
            });
        }
        Ok(())
    }
}

fn split_sections(text: &str) -> Result<BTreeMap<String, RawSection>> {
    let mut sections: BTreeMap<String, RawSection> = BTreeMap::new();
    let mut current = "global".to_string();
    sections.insert(
        current.clone(),
        RawSection {
            entries: BTreeMap::new(),
        },
    );
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "unterminated section header".into(),
                });
            }
            let name = line[1..line.len() - 1].trim().to_string();
            if !["pretrain", "finetune", "eval", "oracle"].contains(&name.as_str()) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown section [{name}]"),
                });
            }
            current = name;
            sections.entry(current.clone()).or_insert(RawSection {
                entries: BTreeMap::new(),
            });
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let sec = sections.get_mut(&current).expect("section exists");
        if sec.entries.contains_key(&key) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate key {key:?}"),
            });
        }
        sec.entries.insert(key, (line_no, value));
    }
    Ok(sections)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = split_sections(text)?;
        let mut empty = RawSection {
            entries: BTreeMap::new(),
        };

        // Global.
        let mut global = sections.remove("global").unwrap_or(RawSection {
            entries: BTreeMap::new(),
        });
        let seed = match global.take("seed") {
            Some(v) => parse_usize(&v)? as u64,
            None => 0,
        };
        global.finish("global")?;

        // Pretrain.
        let p = sections.get_mut("pretrain").unwrap_or(&mut empty);
        let mut pre = PretrainConfig::default();
        if let Some(v) = p.take("t_horizon") {
            pre.t_horizon = parse_usize(&v)?;
        }
        if let Some(v) = p.take("schedule") {
            pre.schedule = ScheduleSpec::parse(&v)?;
        }
        if let Some(v) = p.take("data") {
            pre.data = match v.as_str() {
                "std-normal" => DataKind::StdNormal,
                "cond-mixture" => DataKind::CondMixture,
                other => return Err(Error::Config(format!("unknown data kind {other:?}"))),
            };
        }
        if let Some(v) = p.take("dim") {
            pre.dim = parse_usize(&v)?;
        }
        if let Some(v) = p.take("data_means") {
            pre.data_means = parse_f64_list(&v)?;
        }
        if let Some(v) = p.take("data_vars") {
            pre.data_vars = parse_f64_list(&v)?;
        }
        if let Some(v) = p.take("cond_probs") {
            pre.cond_probs = parse_f64_list(&v)?;
        }
        if let Some(v) = p.take("hidden") {
            pre.hidden = parse_usize_list(&v)?;
        }
        if let Some(v) = p.take("embed_dim") {
            pre.embed_dim = parse_usize(&v)?;
        }
        if let Some(v) = p.take("cond_dim") {
            pre.cond_dim = parse_usize(&v)?;
        }
        if let Some(v) = p.take("iterations") {
            pre.iterations = parse_usize(&v)?;
        }
        if let Some(v) = p.take("batch_size") {
            pre.batch_size = parse_usize(&v)?;
        }
        if let Some(v) = p.take("lr") {
            pre.lr = parse_f64(&v)?;
        }
        if let Some(v) = p.take("p_drop") {
            pre.p_drop = parse_f64(&v)?;
        }
        if let Some(sec) = sections.remove("pretrain") {
            sec.finish("pretrain")?;
        }

        // Finetune: algorithm and parameterization steer the defaults, so
        // read them first.
        let f = sections.get_mut("finetune").unwrap_or(&mut empty);
        let algorithm = match f.take("algorithm") {
            Some(v) => Algorithm::from_name(&v)?,
            None => Algorithm::Ppo,
        };
        let parameterization = match f.take("parameterization") {
            Some(v) => ComposeMode::from_name(&v)?,
            None => ComposeMode::SideNet,
        };
        let mut fin = FinetuneConfig::defaults_for(algorithm, parameterization);
        if let Some(v) = f.take("tau") {
            fin.tau = parse_f64(&v)?;
            // Keep the documented alpha = 1 + tau coupling when the
            // divergence is left to default under RWL.
            if algorithm == Algorithm::Rwl {
                fin.fdiv_name = format!("alpha:{}", 1.0 + fin.tau);
            }
        }
        if let Some(v) = f.take("fdiv") {
            FDiv::from_name(&v)?;
            fin.fdiv_name = v;
        }
        if let Some(v) = f.take("weighting") {
            fin.weighting = match v.as_str() {
                "auto" => None,
                "exponential" => Some(Weighting::Exponential),
                "linear" => Some(Weighting::Linear),
                other => {
                    if let Some(rest) = other.strip_prefix("polynomial:") {
                        Some(Weighting::Polynomial {
                            alpha: parse_f64(rest)?,
                        })
                    } else {
                        return Err(Error::Config(format!("unknown weighting {other:?}")));
                    }
                }
            };
        }
        if let Some(v) = f.take("lambda_cfg") {
            fin.lambda_cfg = parse_f64(&v)?;
        }
        if let Some(v) = f.take("lambda_model") {
            fin.lambda_model = parse_f64(&v)?;
        }
        if let Some(v) = f.take("p_drop") {
            fin.p_drop = parse_f64(&v)?;
        }
        if let Some(v) = f.take("clip_delta") {
            fin.clip_delta = parse_f64(&v)?;
        }
        if let Some(v) = f.take("lr_side") {
            fin.lr_side = parse_f64(&v)?;
        }
        if let Some(v) = f.take("lr_lora") {
            fin.lr_lora = parse_f64(&v)?;
        }
        if let Some(v) = f.take("batch_size") {
            fin.batch_size = parse_usize(&v)?;
        }
        if let Some(v) = f.take("iterations") {
            fin.iterations = parse_usize(&v)?;
        }
        if let Some(v) = f.take("sample_every") {
            fin.sample_every = parse_usize(&v)?;
        }
        if let Some(v) = f.take("ppo_epochs") {
            fin.ppo_epochs = parse_usize(&v)?;
        }
        if let Some(v) = f.take("reward") {
            fin.reward = RewardConfig::parse(&v)?;
        }
        if let Some(v) = f.take("baseline_mode") {
            fin.baseline = match v.as_str() {
                "first-batch-mean" => BaselineMode::FirstBatchMean,
                "batch-mean" => BaselineMode::BatchMean,
                "batch-max" => BaselineMode::BatchMax,
                "exact" => BaselineMode::ExactBisection,
                other => {
                    if let Some(rest) = other.strip_prefix("fixed:") {
                        BaselineMode::Fixed(parse_f64(rest)?)
                    } else {
                        return Err(Error::Config(format!("unknown baseline mode {other:?}")));
                    }
                }
            };
        }
        if let Some(v) = f.take("rwl_sampling") {
            fin.rwl_sampling = match v.as_str() {
                "online" => SampleSource::Online,
                "teacher" => SampleSource::Teacher,
                other => return Err(Error::Config(format!("unknown sampling {other:?}"))),
            };
        }
        if let Some(v) = f.take("reuse_noise") {
            fin.reuse_noise = parse_bool(&v)?;
        }
        if let Some(v) = f.take("rollout_cfg") {
            fin.rollout_cfg = parse_bool(&v)?;
        }
        if let Some(v) = f.take("side_hidden") {
            fin.side_hidden = parse_usize_list(&v)?;
        }
        if let Some(v) = f.take("lora_rank") {
            fin.lora_rank = parse_usize(&v)?;
        }
        if let Some(v) = f.take("lora_scale") {
            fin.lora_scale = parse_f64(&v)?;
        }
        if let Some(v) = f.take("sft_target") {
            fin.sft_target = match v.as_str() {
                "tilted" => SftTarget::Tilted,
                "pretrain-data" => SftTarget::PretrainData,
                other => return Err(Error::Config(format!("unknown sft target {other:?}"))),
            };
        }
        if let Some(v) = f.take("sft_samples") {
            fin.sft_samples = parse_usize(&v)?;
        }
        if let Some(sec) = sections.remove("finetune") {
            sec.finish("finetune")?;
        }

        // Eval.
        let e = sections.get_mut("eval").unwrap_or(&mut empty);
        let mut eval = EvalConfig::default();
        if let Some(v) = e.take("n_samples") {
            eval.n_samples = parse_usize(&v)?;
        }
        if let Some(v) = e.take("n_kl") {
            eval.n_kl = parse_usize(&v)?;
        }
        if let Some(v) = e.take("lambda_sweep") {
            eval.lambda_sweep = parse_f64_list(&v)?;
        }
        if let Some(v) = e.take("tabular") {
            eval.tabular = parse_bool(&v)?;
        }
        if let Some(sec) = sections.remove("eval") {
            sec.finish("eval")?;
        }

        // Oracle.
        let o = sections.get_mut("oracle").unwrap_or(&mut empty);
        let mut oracle = OracleConfig::default();
        if let Some(v) = o.take("chain") {
            oracle.chain = ChainSpec::parse(&v)?;
        }
        if let Some(v) = o.take("tau") {
            oracle.tau = parse_f64(&v)?;
        }
        if let Some(v) = o.take("fdiv") {
            FDiv::from_name(&v)?;
            oracle.fdiv_name = v;
        }
        if let Some(v) = o.take("gauss_mean") {
            oracle.gauss_mean = parse_f64(&v)?;
        }
        if let Some(v) = o.take("gauss_var") {
            oracle.gauss_var = parse_f64(&v)?;
        }
        if let Some(sec) = sections.remove("oracle") {
            sec.finish("oracle")?;
        }

        let cfg = Self {
            seed,
            pretrain: pre,
            finetune: fin,
            eval,
            oracle,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.finetune.tau < 0.0 {
            return Err(Error::Config(format!(
                "tau must be nonnegative, got {}",
                self.finetune.tau
            )));
        }
        if self.finetune.algorithm == Algorithm::Rwl && self.finetune.tau == 0.0 {
            return Err(Error::Config(
                "reward-weighted regression needs tau > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.finetune.p_drop) || !(0.0..1.0).contains(&self.pretrain.p_drop)
        {
            return Err(Error::Config("p_drop must lie in [0, 1)".into()));
        }
        if self.finetune.lambda_model < 0.0 || self.finetune.lambda_cfg < 0.0 {
            return Err(Error::Config("guidance strengths must be >= 0".into()));
        }
        if !(0.0 < self.finetune.clip_delta && self.finetune.clip_delta < 1.0) {
            return Err(Error::Config("clip_delta must lie in (0, 1)".into()));
        }
        for (name, lr) in [
            ("pretrain lr", self.pretrain.lr),
            ("lr_side", self.finetune.lr_side),
            ("lr_lora", self.finetune.lr_lora),
        ] {
            if lr <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.eval.lambda_sweep.is_empty() {
            return Err(Error::Config("lambda_sweep must be nonempty".into()));
        }
        if self.oracle.tau <= 0.0 {
            return Err(Error::Config("oracle tau must be positive".into()));
        }
        self.pretrain.build_data_spec()?;
        self.pretrain.build_schedule()?;
        self.finetune.fdiv()?;
        self.oracle.fdiv()?;
        Ok(())
    }

    /// Canonical rendering: every key explicit, fixed order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let p = &self.pretrain;
        let _ = writeln!(s, "\n[pretrain]");
        let _ = writeln!(s, "t_horizon = {}", p.t_horizon);
        let _ = writeln!(s, "schedule = {}", p.schedule.render());
        let _ = writeln!(
            s,
            "data = {}",
            match p.data {
                DataKind::StdNormal => "std-normal",
                DataKind::CondMixture => "cond-mixture",
            }
        );
        let _ = writeln!(s, "dim = {}", p.dim);
        let _ = writeln!(s, "data_means = {}", render_list(&p.data_means));
        let _ = writeln!(s, "data_vars = {}", render_list(&p.data_vars));
        let _ = writeln!(s, "cond_probs = {}", render_list(&p.cond_probs));
        let _ = writeln!(s, "hidden = {}", render_list(&p.hidden));
        let _ = writeln!(s, "embed_dim = {}", p.embed_dim);
        let _ = writeln!(s, "cond_dim = {}", p.cond_dim);
        let _ = writeln!(s, "iterations = {}", p.iterations);
        let _ = writeln!(s, "batch_size = {}", p.batch_size);
        let _ = writeln!(s, "lr = {}", p.lr);
        let _ = writeln!(s, "p_drop = {}", p.p_drop);
        let f = &self.finetune;
        let _ = writeln!(s, "\n[finetune]");
        let _ = writeln!(s, "algorithm = {}", f.algorithm.name());
        let _ = writeln!(s, "parameterization = {}", f.parameterization.name());
        let _ = writeln!(s, "tau = {}", f.tau);
        let _ = writeln!(s, "fdiv = {}", f.fdiv_name);
        let _ = writeln!(
            s,
            "weighting = {}",
            match &f.weighting {
                None => "auto".to_string(),
                Some(Weighting::Exponential) => "exponential".to_string(),
                Some(Weighting::Linear) => "linear".to_string(),
                Some(Weighting::Polynomial { alpha }) => format!("polynomial:{alpha}"),
            }
        );
        let _ = writeln!(s, "lambda_cfg = {}", f.lambda_cfg);
        let _ = writeln!(s, "lambda_model = {}", f.lambda_model);
        let _ = writeln!(s, "p_drop = {}", f.p_drop);
        let _ = writeln!(s, "clip_delta = {}", f.clip_delta);
        let _ = writeln!(s, "lr_side = {}", f.lr_side);
        let _ = writeln!(s, "lr_lora = {}", f.lr_lora);
        let _ = writeln!(s, "batch_size = {}", f.batch_size);
        let _ = writeln!(s, "iterations = {}", f.iterations);
        let _ = writeln!(s, "sample_every = {}", f.sample_every);
        let _ = writeln!(s, "ppo_epochs = {}", f.ppo_epochs);
        let _ = writeln!(s, "reward = {}", f.reward.render());
        let _ = writeln!(
            s,
            "baseline_mode = {}",
            match &f.baseline {
                BaselineMode::Fixed(b) => format!("fixed:{b}"),
                BaselineMode::FirstBatchMean => "first-batch-mean".into(),
                BaselineMode::BatchMean => "batch-mean".into(),
                BaselineMode::BatchMax => "batch-max".into(),
                BaselineMode::ExactBisection => "exact".into(),
            }
        );
        let _ = writeln!(
            s,
            "rwl_sampling = {}",
            match f.rwl_sampling {
                SampleSource::Online => "online",
                SampleSource::Teacher => "teacher",
            }
        );
        let _ = writeln!(s, "reuse_noise = {}", f.reuse_noise);
        let _ = writeln!(s, "rollout_cfg = {}", f.rollout_cfg);
        let _ = writeln!(s, "side_hidden = {}", render_list(&f.side_hidden));
        let _ = writeln!(s, "lora_rank = {}", f.lora_rank);
        let _ = writeln!(s, "lora_scale = {}", f.lora_scale);
        let _ = writeln!(
            s,
            "sft_target = {}",
            match f.sft_target {
                SftTarget::Tilted => "tilted",
                SftTarget::PretrainData => "pretrain-data",
            }
        );
        let _ = writeln!(s, "sft_samples = {}", f.sft_samples);
        let e = &self.eval;
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "n_samples = {}", e.n_samples);
        let _ = writeln!(s, "n_kl = {}", e.n_kl);
        let _ = writeln!(s, "lambda_sweep = {}", render_list(&e.lambda_sweep));
        let _ = writeln!(s, "tabular = {}", e.tabular);
        let o = &self.oracle;
        let _ = writeln!(s, "\n[oracle]");
        let _ = writeln!(s, "chain = {}", o.chain.render());
        let _ = writeln!(s, "tau = {}", o.tau);
        let _ = writeln!(s, "fdiv = {}", o.fdiv_name);
        let _ = writeln!(s, "gauss_mean = {}", o.gauss_mean);
        let _ = writeln!(s, "gauss_var = {}", o.gauss_var);
        s
    }
}

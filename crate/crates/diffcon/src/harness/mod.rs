//! Experiment orchestration: configs, the four pipeline commands, evaluation,
//! and CSV emission.

pub mod commands;
pub mod config;
pub mod csvout;
pub mod eval;

pub use commands::{cmd_eval, cmd_finetune, cmd_oracle, cmd_pretrain, FINETUNED_FILE, PRETRAINED_FILE};
pub use config::{
    Algorithm, ChainSpec, DataKind, EvalConfig, ExperimentConfig, FinetuneConfig, OracleConfig,
    PretrainConfig, RewardConfig, ScheduleSpec, SftTarget,
};
pub use eval::{
    evaluate, evaluate_tabular, total_variation, wasserstein1_sorted, wilson_halfwidth, EvalReport,
    EvalRow, EvalSettings,
};

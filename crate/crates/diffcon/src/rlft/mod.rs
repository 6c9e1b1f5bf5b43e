//! RL fine-tuning: rollouts with dual log-density tracks, soft advantages,
//! the f-regularized policy gradient, PPO, and reward-weighted regression.

mod advantage;
mod pg;
mod rwl;
mod train;
mod trajectory;

pub use advantage::{
    policy_values, sample_tabular_paths, soft_advantage_exact, soft_advantage_mc,
    tabular_traj_stats, ExactAdvantage, McAdvantage, McBaseline, TabularPolicy,
};
pub use pg::{
    clip, pg_surrogate, policy_gradient_neural, ppo_loss, tabular_objective,
    tabular_policy_gradient, TabularLogits,
};
pub use rwl::{rwl_loss, rwl_weights, ResolvedBaseline, Weighting};
pub use train::{
    pg_finetune, ppo_finetune, pretrain_score_model, rwl_finetune, sft_finetune, Clock, LogRow,
    PolicyRlConfig, RwlConfig, SampleSource, TrainLog,
};
pub use trajectory::{
    rollout, BaselineMode, RewardForm, RewardSpec, RolloutBatch, TrajStats, Trajectory,
};

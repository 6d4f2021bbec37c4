//! Policy-gradient fine-tuning: rollouts, difficulty weights, the clipped objective and the outer loop.

pub mod difficulty;
pub mod objective;
pub mod rollout;
pub mod train;

pub use difficulty::{difficulty_weights, DifficultyBatch, DifficultyItem};
pub use objective::{
    clipped_objective, combined_loss, importance_ratio, kl_penalty, prepare_policy_steps, surrogate_term,
    surrogate_value, LossBreakdown, LossWeights, PolicyStep,
};
pub use rollout::{collect_rollouts, RolloutOptions, RolloutRequest};
pub use train::{
    evaluate_model, run_rl_training, score_outputs, AblationFlags, AdvantageMode, RlConfig, RlInputs, RlOutcome, RlTrainer,
    TrainingMode,
};

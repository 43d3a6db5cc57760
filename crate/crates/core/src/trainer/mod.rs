//! Policy optimization, rollouts and the staged training driver.

pub mod adaptation;
pub mod checkpoint;
pub mod curriculum;
pub mod ppo;
pub mod rollout;
pub mod stage;

pub use adaptation::{adaptation_insert, admit_count, finetune_predictor, select_top, AdaptationBuffer, AdaptationEntry};
pub use curriculum::{curriculum_update, next_level, CurriculumState, EpisodeResult};
pub use ppo::{
    clipped_surrogate, compute_gae, gaussian_log_prob, normalize_advantages, ppo_update, sample_action,
    surrogate_objective, ActorCritic, PpoBatch, PpoConfig, PpoOptimizers, PpoStats, RunningNormalizer,
};
pub use rollout::{
    mean_term, policy_divergence, EpisodeEnd, EpisodeRecord, Reference, RewardMode, RolloutBatch, RolloutCollector,
    RolloutConfig, StepContext, Transition,
};
pub use checkpoint::{file_hash, PolicyCheckpoint, POLICY_FORMAT, POLICY_VERSION};
pub use stage::{
    reference_windows, run_stage, IterationMetrics, StageOutcome, ADAPTED_CHECKPOINT, CONFIG_FILE, METRICS_FILE,
    PRIOR_CHECKPOINT, PRIOR_METRICS_FILE, STYLE_CHECKPOINT,
};

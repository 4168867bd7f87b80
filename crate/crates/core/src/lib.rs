//! Group-relative policy optimisation on a small synthetic diagnosis task.
//!
//! A tabular softmax policy answers one of seven skin-disease labels per
//! prompt. Rewards come from an asymmetric penalty table. Two advantage
//! estimators are provided: the standard group-normalised one and a
//! confidence-aware variant that penalises all-wrong groups in proportion to
//! the policy's own confidence.

pub mod advantage;
pub mod env;
pub mod error;
pub mod eval;
pub mod objective;
pub mod policy;
pub mod rewards;
pub mod trainer;
pub mod verify;

pub use advantage::{
    ca_advantage, grpo_advantage, AdvantageEstimator, AdvantageSet, Branch, Grpo, GrpoPlusPlus,
    ResponseGroup,
};
pub use env::{make_env, Env, EnvMode, EnvSpec, EvalItem};
pub use error::{Error, Result};
pub use objective::{
    objective_gradient, objective_value, ClipConfig, KlPenalty, ObjectiveReport, Surrogate,
};
pub use policy::{PolicyParams, PolicyShape, Prompt, Response};
pub use rewards::{extract_answer, load_reward_spec, reward, Label, RewardSpec};
pub use trainer::{compare_runs, train, Algorithm, StepRow, TrainConfig, TrainReport};

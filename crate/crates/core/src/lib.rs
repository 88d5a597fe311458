//! Correction-oriented policy optimization (CIPO) and its GRPO baseline on
//! synthetic verifiable-reward tasks.
//!
//! - [`types`]: shared domain types and [`ExperimentConfig`]
//! - [`envs`]: prompt banks, the verifier and the initial policy
//! - [`policy`]: linear-softmax policy, gradients and KL
//! - [`grpo`]: group rollouts, group-relative advantages, the update step
//! - [`cipo`]: replay selection, risk shaping, ratio control, the joint step
//! - [`harness`]: evaluation, metrics, export, runs and sweeps

pub mod cipo;
pub mod envs;
pub mod error;
pub mod exec;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod seeding;
pub mod types;

pub use error::{LabError, Result};
pub use exec::Execution;
pub use types::{
    validate_config, Answer, Context, ExperimentConfig, Preset, PromptId, ReplayControllerState,
    RolloutGroup, Trajectory, Verdict,
};

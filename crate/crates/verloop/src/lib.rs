//! Desk-scale iterative policy optimization: group-relative PPO-style updates,
//! a rollout verifier, preference-pair construction, and DPO refinement over a
//! toy differentiable sequence policy.

pub mod backends;
pub mod config;
pub mod dpo;
pub mod error;
pub mod extraction;
pub mod grpo;
pub mod orchestrator;
pub mod pairs;
pub mod policy;
pub mod rewards;
pub mod seeding;
pub mod store;
pub mod task;
pub mod verifier;

pub use error::{Error, Result};
pub use extraction::{
    check_format, extract_sections, normalize_answer, CanonicalAnswer, ParsedResponse,
    QuestionType,
};

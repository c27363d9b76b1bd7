//! Declarative run configuration, one TOML file per experiment.
//!
//! Schema defaults mirror the documented full-scale hyperparameters (batch
//! sizes 64/64/32, learning rates 1e-6 and 5e-7, eight rollouts per prompt,
//! sampling temperature 1.0, preference beta 0.1). Those rates target
//! billion-parameter models; [`IterationConfig::toy`] overrides them with
//! desk-scale values for the synthetic tasks while keeping the same shape.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairs::PairConfig;
use crate::task::DatasetSpec;
use crate::verifier::VerifierConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Sequences per optimizer step; with `group_size` rollouts per prompt
    /// this yields `global_batch / group_size` groups per step.
    pub global_batch: usize,
    /// Prompts sampled per rollout round.
    pub rollout_batch: usize,
    /// Step size for the first iteration (the activation round).
    pub learning_rate: f64,
    /// Step size for every later iteration's slow-search rounds.
    pub continue_learning_rate: f64,
    /// Rollouts sampled per prompt.
    #[serde(alias = "G")]
    pub group_size: usize,
    pub temperature: f64,
    /// Ratio clip radius of the surrogate objective.
    pub epsilon: f64,
    /// Reference-divergence penalty weight; zero by default, matching the
    /// removal of the KL term during group-relative training.
    pub beta_kl: f64,
    /// Passes over the active dataset per stage.
    pub epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            global_batch: 64,
            rollout_batch: 64,
            learning_rate: 1e-6,
            continue_learning_rate: 5e-7,
            group_size: 8,
            temperature: 1.0,
            epsilon: 0.2,
            beta_kl: 0.0,
            epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    /// Preference pairs per optimizer step.
    pub batch: usize,
    pub learning_rate: f64,
    /// Preference sharpness (the beta in the pairwise loss).
    pub beta: f64,
    /// Passes over the pair dataset per stage.
    pub epochs: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { batch: 32, learning_rate: 5e-7, beta: 0.1, epochs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Full GRPO -> verify -> DPO rounds after the baseline snapshot.
    pub iterations: usize,
    /// Fraction of mastered prompts removed from the active set per
    /// iteration.
    pub prune_fraction: f64,
    /// Root seed; every sampling stream derives from it.
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { iterations: 2, prune_fraction: 0.8, seed: 42 }
    }
}

/// How the policy parameters start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyInit {
    /// Structural prior: tag discipline is mostly in place, answers are not.
    Templated,
    /// All-zero parameters: uniform next-token distributions.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub init: PolicyInit,
    /// Seed for the templated prior's symmetry-breaking noise.
    pub init_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { init: PolicyInit::Templated, init_seed: 7 }
    }
}

/// Which judge/oracle implementations to use. HTTP endpoints and auth tokens
/// come from environment variables, not the config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub judge: BackendKind,
    pub oracle: BackendKind,
    /// Per-request timeout for HTTP backends.
    pub timeout_ms: u64,
    /// Maximum concurrent HTTP requests across worker threads, shared by
    /// judge and oracle.
    pub max_in_flight: usize,
    /// Prompt sent to the HTTP judge. Placeholders `{question}`, `{think}`,
    /// and `{answer_form}` are substituted per request.
    pub judge_prompt_template: String,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            judge: BackendKind::Mock,
            oracle: BackendKind::Mock,
            timeout_ms: 10_000,
            max_in_flight: 4,
            judge_prompt_template: default_judge_prompt_template(),
        }
    }
}

/// The documented default extraction prompt.
pub fn default_judge_prompt_template() -> String {
    "Extract the final answer the reasoning below arrives at.\n\
     Question: {question}\n\
     Reasoning: {think}\n\
     Reply with only the answer, as {answer_form}."
        .to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub activation_dataset: PathBuf,
    pub train_dataset: PathBuf,
    pub eval_dataset: PathBuf,
    /// Directory for per-iteration rollout stores.
    pub rollout_dir: PathBuf,
    /// Directory for per-iteration pair datasets.
    pub pair_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            activation_dataset: "data/activation.jsonl".into(),
            train_dataset: "data/train.jsonl".into(),
            eval_dataset: "data/eval.jsonl".into(),
            rollout_dir: "runs/rollouts".into(),
            pair_dir: "runs/pairs".into(),
            checkpoint_dir: "runs/checkpoints".into(),
        }
    }
}

/// Split sizes consumed by dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub activation: SplitSpec,
    pub train: SplitSpec,
    pub eval: SplitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub multiple_choice: usize,
    pub math: usize,
    pub distance: usize,
}

impl SplitSpec {
    pub fn to_dataset_spec(&self, id_prefix: &str) -> DatasetSpec {
        DatasetSpec {
            multiple_choice: self.multiple_choice,
            math: self.math,
            distance: self.distance,
            id_prefix: id_prefix.to_owned(),
        }
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { multiple_choice: 16, math: 16, distance: 8 }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            activation: SplitSpec { multiple_choice: 12, math: 12, distance: 0 },
            train: SplitSpec::default(),
            eval: SplitSpec { multiple_choice: 8, math: 8, distance: 4 },
        }
    }
}

/// Everything one run needs, mirrored one-to-one in the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct IterationConfig {
    pub grpo: GrpoConfig,
    pub dpo: DpoConfig,
    #[serde(rename = "loop")]
    pub run: LoopConfig,
    pub policy: PolicyConfig,
    pub verifier: VerifierConfig,
    pub pairs: PairConfig,
    pub backends: BackendsConfig,
    pub paths: PathsConfig,
    pub data: DataConfig,
}

impl IterationConfig {
    /// Desk-scale preset: same schema, learning rates and batch sizes sized
    /// for the feature-based toy policy so a full loop runs in minutes.
    pub fn toy() -> Self {
        let mut config = Self::default();
        config.grpo.global_batch = 16;
        config.grpo.rollout_batch = 16;
        config.grpo.learning_rate = 5e-2;
        config.grpo.continue_learning_rate = 3e-2;
        config.grpo.epochs = 30;
        config.dpo.batch = 8;
        config.dpo.learning_rate = 0.2;
        config.dpo.epochs = 30;
        config
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("unserializable config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, value: f64) -> Result<()> {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {value}")))
            }
        }
        positive("grpo.learning_rate", self.grpo.learning_rate)?;
        positive("grpo.continue_learning_rate", self.grpo.continue_learning_rate)?;
        positive("grpo.temperature", self.grpo.temperature)?;
        positive("grpo.epsilon", self.grpo.epsilon)?;
        positive("dpo.learning_rate", self.dpo.learning_rate)?;
        positive("dpo.beta", self.dpo.beta)?;
        if !(self.grpo.beta_kl.is_finite() && self.grpo.beta_kl >= 0.0) {
            return Err(Error::Config(format!(
                "grpo.beta_kl must be non-negative, got {}",
                self.grpo.beta_kl
            )));
        }
        if self.grpo.group_size < 2 {
            return Err(Error::Config(format!(
                "grpo.group_size must be at least 2 to normalize advantages, got {}",
                self.grpo.group_size
            )));
        }
        for (name, value) in [
            ("grpo.global_batch", self.grpo.global_batch),
            ("grpo.rollout_batch", self.grpo.rollout_batch),
            ("grpo.epochs", self.grpo.epochs),
            ("dpo.batch", self.dpo.batch),
            ("dpo.epochs", self.dpo.epochs),
            ("pairs.max_rejected_tokens", self.pairs.max_rejected_tokens),
            ("backends.max_in_flight", self.backends.max_in_flight),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.run.prune_fraction) {
            return Err(Error::Config(format!(
                "loop.prune_fraction must lie in [0, 1], got {}",
                self.run.prune_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.verifier.mra_threshold) {
            return Err(Error::Config(format!(
                "verifier.mra_threshold must lie in [0, 1), got {}",
                self.verifier.mra_threshold
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------

//! The synthetic question corpus the toy policy trains on.
//!
//! Each prompt hides its target in a prompt-class feature the policy can see
//! (a choice letter, a sum digit, or a distance digit), so correct behavior
//! is learnable: emit a tagged think section, then the class's answer. The
//! question text restates the target for human readers; the policy only
//! consumes the class index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{CanonicalAnswer, QuestionType};
use crate::grpo::RolloutGroup;
use crate::policy::{Rollout, ToyPolicy};
use crate::rewards;
use crate::seeding::derive_seed;

/// One dataset item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub question: String,
    pub qtype: QuestionType,
    pub ground_truth: CanonicalAnswer,
}

impl Prompt {
    /// The prompt-class feature index for the standard policy: 0..3 choice
    /// letters A..D, 4..13 math result digits, 14..23 distance digits.
    pub fn class(&self) -> Result<usize> {
        match (self.qtype, &self.ground_truth) {
            (QuestionType::MultipleChoice, CanonicalAnswer::Choice(c @ 'A'..='D')) => {
                Ok((*c as u8 - b'A') as usize)
            }
            (QuestionType::Math, CanonicalAnswer::Number(v)) => {
                digit_value(*v).map(|d| 4 + d).ok_or_else(|| self.class_error())
            }
            (QuestionType::DistanceEstimation, CanonicalAnswer::Number(v)) => {
                digit_value(*v).filter(|d| *d > 0).map(|d| 14 + d).ok_or_else(|| self.class_error())
            }
            _ => Err(self.class_error()),
        }
    }

    fn class_error(&self) -> Error {
        Error::Config(format!(
            "prompt {} has ground truth {:?} outside the standard task family (A..D, digits)",
            self.id, self.ground_truth
        ))
    }
}

fn digit_value(v: f64) -> Option<usize> {
    (v.fract() == 0.0 && (0.0..=9.0).contains(&v)).then_some(v as usize)
}

/// How many prompts of each kind to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub multiple_choice: usize,
    pub math: usize,
    pub distance: usize,
    /// Prefix for prompt ids, also a seed-derivation label, so differently
    /// named splits get different cosmetic randomness.
    pub id_prefix: String,
}

/// Generate a balanced synthetic dataset. Targets cycle deterministically
/// (every class gets covered); only cosmetic question parameters draw from
/// the seeded stream.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Vec<Prompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["dataset", &spec.id_prefix]));
    let mut prompts = Vec::with_capacity(spec.multiple_choice + spec.math + spec.distance);

    for i in 0..spec.multiple_choice {
        let letter = (b'A' + (i % 4) as u8) as char;
        let position = (i % 4) + 1;
        prompts.push(Prompt {
            id: format!("{}-mc-{i:04}", spec.id_prefix),
            question: format!(
                "Which option letter sits at position {position} of the sequence A, B, C, D? \
                 Panel {:03} shows the sequence in order.",
                rng.gen_range(0..1000)
            ),
            qtype: QuestionType::MultipleChoice,
            ground_truth: CanonicalAnswer::Choice(letter),
        });
    }

    for i in 0..spec.math {
        let sum = i % 10;
        let a = rng.gen_range(0..=sum);
        let b = sum - a;
        prompts.push(Prompt {
            id: format!("{}-math-{i:04}", spec.id_prefix),
            question: format!("Compute {a} + {b}."),
            qtype: QuestionType::Math,
            ground_truth: CanonicalAnswer::Number(sum as f64),
        });
    }

    for i in 0..spec.distance {
        let meters = 1 + (i % 9);
        prompts.push(Prompt {
            id: format!("{}-dist-{i:04}", spec.id_prefix),
            question: format!(
                "Corridor segment {:03} spans {meters} floor tiles of one meter each. \
                 About how many meters long is it?",
                rng.gen_range(0..1000)
            ),
            qtype: QuestionType::DistanceEstimation,
            ground_truth: CanonicalAnswer::Number(meters as f64),
        });
    }

    prompts
}

/// Fill in the reward of a sampled rollout from the prompt's ground truth.
pub fn score_rollout(rollout: &mut Rollout, prompt: &Prompt) -> Result<()> {
    rollout.reward = rewards::total_reward(&rollout.text, &prompt.ground_truth, prompt.qtype)?;
    Ok(())
}

/// Sample a scored rollout group for one prompt.
pub fn rollout_group(
    policy: &ToyPolicy,
    prompt: &Prompt,
    group_size: usize,
    temperature: f64,
    seed: u64,
) -> Result<RolloutGroup> {
    let class = prompt.class()?;
    let mut rollouts = policy.sample_rollouts(&prompt.id, class, group_size, temperature, seed)?;
    for rollout in &mut rollouts {
        score_rollout(rollout, prompt)?;
    }
    RolloutGroup::from_rollouts(prompt.id.clone(), rollouts)
}

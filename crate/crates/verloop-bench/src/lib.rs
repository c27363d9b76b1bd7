//! Shared fixtures for the benchmarks: a seeded policy, a scored rollout
//! group, and a tokenized preference batch at the standard desk scale.

use verloop::dpo::TokenizedPair;
use verloop::extraction::{CanonicalAnswer, QuestionType};
use verloop::grpo::RolloutGroup;
use verloop::policy::ToyPolicy;
use verloop::task::{self, Prompt};

pub const GROUP_SIZE: usize = 8;

pub fn bench_policy() -> ToyPolicy {
    ToyPolicy::templated(17)
}

pub fn bench_prompt() -> Prompt {
    Prompt {
        id: "bench-mc".into(),
        question: "Which option letter sits at position 2 of the sequence A, B, C, D?".into(),
        qtype: QuestionType::MultipleChoice,
        ground_truth: CanonicalAnswer::Choice('B'),
    }
}

pub fn bench_group(policy: &ToyPolicy) -> RolloutGroup {
    task::rollout_group(policy, &bench_prompt(), GROUP_SIZE, 1.0, 99).expect("rollouts sample")
}

/// Eight pairs tokenized against the standard vocabulary.
pub fn bench_pairs(policy: &ToyPolicy) -> Vec<TokenizedPair> {
    let prompt = bench_prompt();
    let class = prompt.class().expect("standard prompt class");
    (0..8)
        .map(|i| {
            let chosen = format!(
                "<think> we check step {i} carefully and the answer is B </think> <answer> B </answer>"
            );
            let rejected =
                format!("<think> so step {i} gives C </think> <answer> C </answer>");
            TokenizedPair {
                class,
                chosen: policy.tokenize(&chosen),
                rejected: policy.tokenize(&rejected),
            }
        })
        .collect()
}

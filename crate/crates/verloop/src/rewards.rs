//! Accuracy and format rewards for rollouts.
//!
//! Accuracy is binary for math and multiple-choice questions and continuous
//! (mean relative accuracy) for distance estimation. Format adds 0.5 when the
//! response matches the tag grammar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{self, CanonicalAnswer, QuestionType};

/// Reward granted for matching the tag grammar.
pub const FORMAT_REWARD: f64 = 0.5;

/// Confidence thresholds for mean relative accuracy, as integer percents.
/// Kept integral so the cutoffs `(100 - pct) / 100` are the correctly rounded
/// floats for 0.05..0.50; computing `1.0 - 0.55` instead would give a
/// different value than the literal `0.45`.
const MRA_THRESHOLD_PCTS: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

/// Per-rollout reward components. `total` is always `accuracy + format`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: f64,
    pub format: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(accuracy: f64, format: f64) -> Self {
        Self { accuracy, format, total: accuracy + format }
    }
}

/// Mean relative accuracy: the fraction of confidence thresholds theta in
/// {0.50, 0.55, ..., 0.95} at which the relative error stays strictly below
/// `1 - theta`.
///
/// A zero ground truth makes relative error undefined; that case degenerates
/// to exact match (1 if the prediction is also zero, else 0).
pub fn mra(prediction: f64, ground_truth: f64) -> f64 {
    if ground_truth == 0.0 {
        return if prediction == 0.0 { 1.0 } else { 0.0 };
    }
    let relative_error = (prediction - ground_truth).abs() / ground_truth.abs();
    let passed = MRA_THRESHOLD_PCTS
        .iter()
        .filter(|&&pct| relative_error < (100 - pct) as f64 / 100.0)
        .count();
    passed as f64 / MRA_THRESHOLD_PCTS.len() as f64
}

fn variant_mismatch(qtype: QuestionType, ground_truth: &CanonicalAnswer) -> Error {
    Error::Config(format!(
        "ground truth {ground_truth:?} does not match question type {qtype:?}"
    ))
}

/// Accuracy component for one parsed answer. `answer` is `None` when the
/// rollout had no parseable answer, which scores 0 rather than erroring.
///
/// Errors only when the ground truth's canonical variant cannot belong to the
/// question type (a dataset problem, not a rollout problem).
pub fn accuracy_reward(
    answer: Option<&CanonicalAnswer>,
    ground_truth: &CanonicalAnswer,
    qtype: QuestionType,
) -> Result<f64> {
    match qtype {
        QuestionType::MultipleChoice => {
            if !matches!(ground_truth, CanonicalAnswer::Choice(_)) {
                return Err(variant_mismatch(qtype, ground_truth));
            }
            Ok(answer.is_some_and(|a| a.equivalent(ground_truth)) as u8 as f64)
        }
        QuestionType::Math => {
            if matches!(ground_truth, CanonicalAnswer::Choice(_)) {
                return Err(variant_mismatch(qtype, ground_truth));
            }
            Ok(answer.is_some_and(|a| a.equivalent(ground_truth)) as u8 as f64)
        }
        QuestionType::DistanceEstimation => {
            let gt = ground_truth
                .as_number()
                .ok_or_else(|| variant_mismatch(qtype, ground_truth))?;
            Ok(answer.and_then(CanonicalAnswer::as_number).map_or(0.0, |pred| mra(pred, gt)))
        }
    }
}

/// Format component: [`FORMAT_REWARD`] iff the response matches the tag
/// grammar.
pub fn format_reward(response: &str) -> f64 {
    if extraction::check_format(response) {
        FORMAT_REWARD
    } else {
        0.0
    }
}

/// Score a raw response end to end: extract the answer section, normalize it,
/// then combine accuracy and format components.
pub fn total_reward(
    response: &str,
    ground_truth: &CanonicalAnswer,
    qtype: QuestionType,
) -> Result<RewardBreakdown> {
    let parsed = extraction::extract_sections(response);
    let answer = parsed
        .answer_raw
        .as_deref()
        .and_then(|raw| extraction::normalize_answer(raw, qtype));
    let accuracy = accuracy_reward(answer.as_ref(), ground_truth, qtype)?;
    Ok(RewardBreakdown::new(accuracy, format_reward(response)))
}

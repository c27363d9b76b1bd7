//! The rollout-aware verifier: four checks per rollout (accuracy,
//! think/answer consistency, sentence repetition, think length) composed
//! into a [`VerifierReport`]. Reasoning-answer extraction goes through a
//! pluggable judge backend; the deterministic mock keeps tests and CI
//! hermetic while the HTTP client serves real runs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::extraction::{self, CanonicalAnswer, QuestionType};
use crate::rewards;

/// How a rollout's reasoning relates to its final answer, judged against the
/// ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Consistency {
    /// Reasoning and final answer agree.
    Consistent,
    /// Reasoning reached the right answer but the final answer is wrong.
    ThinkRightAnswerWrong,
    /// Final answer is right but the reasoning concluded something else.
    ThinkWrongAnswerRight,
    /// Reasoning and final answer disagree and neither is right.
    BothWrong,
    /// No reasoning answer available (judge failure or no think section).
    Unknown,
}

/// Verdict of the four checks for one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub accuracy_pass: bool,
    pub extracted_reasoning_answer: Option<CanonicalAnswer>,
    pub consistency: Consistency,
    pub repetition_flag: bool,
    /// Normalized sentences that repeat, sorted for order independence.
    pub offending_sentences: Vec<String>,
    /// Whitespace-token count of the think section (0 when absent). The
    /// pair builder uses this as its length-priority key.
    pub think_length_tokens: usize,
}

impl VerifierReport {
    /// The filter the pair builder consumes: correct, consistent, and free
    /// of sentence repetition.
    pub fn is_positive_candidate(&self) -> bool {
        self.accuracy_pass && self.consistency == Consistency::Consistent && !self.repetition_flag
    }
}

/// Verifier thresholds. Defaults match the documented behavior: strict 0.6
/// on mean relative accuracy, repetition at two occurrences of a sentence of
/// at least 15 normalized characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierConfig {
    pub mra_threshold: f64,
    pub repetition_min_chars: usize,
    pub repetition_min_count: usize,
    pub judge_retries: u32,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self { mra_threshold: 0.6, repetition_min_chars: 15, repetition_min_count: 2, judge_retries: 2 }
    }
}

/// Why a judge or oracle call yielded no usable text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendFailure {
    /// The backend answered but found nothing to extract. Not retried.
    Extraction,
    /// The request itself failed (network, timeout, bad status). Retried.
    Transport(String),
}

/// Extracts the answer a reasoning trace arrives at. Implementations must be
/// deterministic for identical inputs (the mock is; an HTTP judge is as
/// deterministic as the model behind it).
pub trait JudgeBackend: Send + Sync {
    fn extract_answer(
        &self,
        question: &str,
        think: &str,
        qtype: QuestionType,
    ) -> std::result::Result<String, BackendFailure>;
}

/// Rule-based judge: the answer a think text "arrives at" is its last
/// standalone choice letter (multiple choice) or last number (numeric
/// questions), mirroring how a conclusion supersedes earlier hypotheses.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockJudge;

impl JudgeBackend for MockJudge {
    fn extract_answer(
        &self,
        _question: &str,
        think: &str,
        qtype: QuestionType,
    ) -> std::result::Result<String, BackendFailure> {
        match qtype {
            QuestionType::MultipleChoice => extraction::choice_letters(think)
                .last()
                .map(|c| c.to_string())
                .ok_or(BackendFailure::Extraction),
            QuestionType::Math | QuestionType::DistanceEstimation => think
                .split_whitespace()
                .rev()
                .map(extraction::strip_wrapping)
                .find(|word| extraction::parse_number(word).is_some())
                .map(str::to_owned)
                .ok_or(BackendFailure::Extraction),
        }
    }
}

/// Whether the rollout's final answer clears the accuracy bar: exact for
/// math/multiple-choice, mean relative accuracy strictly above the
/// threshold for distance estimation.
pub fn accuracy_check(
    response: &str,
    ground_truth: &CanonicalAnswer,
    qtype: QuestionType,
    mra_threshold: f64,
) -> Result<bool> {
    let accuracy = rewards::total_reward(response, ground_truth, qtype)?.accuracy;
    Ok(match qtype {
        QuestionType::Math | QuestionType::MultipleChoice => accuracy == 1.0,
        QuestionType::DistanceEstimation => accuracy > mra_threshold,
    })
}

/// Ask the judge what answer the think text reaches, retrying transport
/// failures up to `retries` extra attempts. `None` means no usable answer
/// (empty think, extraction failure, exhausted retries, or unparseable
/// reply); the caller degrades to [`Consistency::Unknown`].
pub fn judge_extract_answer(
    question: &str,
    think: &str,
    qtype: QuestionType,
    backend: &dyn JudgeBackend,
    retries: u32,
) -> Option<CanonicalAnswer> {
    if think.trim().is_empty() {
        return None;
    }
    for attempt in 0..=retries {
        match backend.extract_answer(question, think, qtype) {
            Ok(text) => return extraction::normalize_answer(&text, qtype),
            Err(BackendFailure::Extraction) => return None,
            Err(BackendFailure::Transport(reason)) => {
                log::warn!("judge transport failure (attempt {attempt}): {reason}");
            }
        }
    }
    None
}

/// Classify reasoning-vs-answer agreement. A missing extracted answer is
/// Unknown; a missing final answer counts as a wrong final answer.
pub fn consistency_check(
    extracted: Option<&CanonicalAnswer>,
    final_answer: Option<&CanonicalAnswer>,
    ground_truth: &CanonicalAnswer,
) -> Consistency {
    let Some(extracted) = extracted else {
        return Consistency::Unknown;
    };
    let extracted_right = extracted.equivalent(ground_truth);
    let final_right = final_answer.is_some_and(|f| f.equivalent(ground_truth));
    if final_answer.is_some_and(|f| extracted.equivalent(f)) {
        return Consistency::Consistent;
    }
    match (extracted_right, final_right) {
        // Numeric tolerance is not transitive; two answers each within
        // tolerance of the ground truth count as agreeing.
        (true, true) => Consistency::Consistent,
        (true, false) => Consistency::ThinkRightAnswerWrong,
        (false, true) => Consistency::ThinkWrongAnswerRight,
        (false, false) => Consistency::BothWrong,
    }
}

fn normalize_sentence(sentence: &str) -> String {
    sentence
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Flag sentence-level repetition in think text: any normalized sentence of
/// at least `min_chars` characters occurring at least `min_count` times.
/// Returns the repeated sentences sorted, so the result is invariant under
/// sentence reordering.
pub fn detect_repetition(
    think: &str,
    min_chars: usize,
    min_count: usize,
) -> (bool, Vec<String>) {
    let mut counts: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for raw in think.split(['.', '!', '?', '\n']) {
        let normalized = normalize_sentence(raw);
        if normalized.chars().count() >= min_chars {
            *counts.entry(normalized).or_insert(0) += 1;
        }
    }
    let mut offending: Vec<String> = counts
        .into_iter()
        .filter(|(_, count)| *count >= min_count)
        .map(|(sentence, _)| sentence)
        .collect();
    offending.sort();
    (!offending.is_empty(), offending)
}

/// Run all four checks on one rollout. Judge failures degrade the
/// consistency field to Unknown; the only error path is a ground truth that
/// cannot belong to the question type.
pub fn verify_rollout(
    response: &str,
    question: &str,
    ground_truth: &CanonicalAnswer,
    qtype: QuestionType,
    backend: &dyn JudgeBackend,
    config: &VerifierConfig,
) -> Result<VerifierReport> {
    let parsed = extraction::extract_sections(response);
    let final_answer = parsed
        .answer_raw
        .as_deref()
        .and_then(|raw| extraction::normalize_answer(raw, qtype));
    let accuracy_pass = accuracy_check(response, ground_truth, qtype, config.mra_threshold)?;
    let think = parsed.think.as_deref().unwrap_or("");
    let extracted =
        judge_extract_answer(question, think, qtype, backend, config.judge_retries);
    let consistency = consistency_check(extracted.as_ref(), final_answer.as_ref(), ground_truth);
    let (repetition_flag, offending_sentences) =
        detect_repetition(think, config.repetition_min_chars, config.repetition_min_count);
    Ok(VerifierReport {
        accuracy_pass,
        extracted_reasoning_answer: extracted,
        consistency,
        repetition_flag,
        offending_sentences,
        think_length_tokens: think.split_whitespace().count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn choice(c: char) -> CanonicalAnswer {
        CanonicalAnswer::Choice(c)
    }

    fn number(v: f64) -> CanonicalAnswer {
        CanonicalAnswer::Number(v)
    }

    // ------------------------------------------------------------------
    // accuracy_check
    // ------------------------------------------------------------------

    #[test]
    fn accuracy_check_is_binary_for_choice_questions() {
        let gt = choice('B');
        let right = "<think>t</think><answer>$B$</answer>";
        let wrong = "<think>t</think><answer>$C$</answer>";
        let unparseable = "<think>t</think><answer>maybe</answer>";
        assert!(accuracy_check(right, &gt, QuestionType::MultipleChoice, 0.6).unwrap());
        assert!(!accuracy_check(wrong, &gt, QuestionType::MultipleChoice, 0.6).unwrap());
        assert!(!accuracy_check(unparseable, &gt, QuestionType::MultipleChoice, 0.6).unwrap());
    }

    #[test]
    fn accuracy_check_uses_strict_mra_threshold() {
        let gt = number(5.0);
        // Prediction 6.5 gives mra 0.4; prediction 5.5 gives mra 0.8;
        // prediction 6.0 gives relative error 0.2 -> mra 0.6 exactly, which
        // must fail a strict "surpasses 0.6".
        let mra = |pred: &str| {
            let response = format!("<think>t</think><answer>{pred}</answer>");
            accuracy_check(&response, &gt, QuestionType::DistanceEstimation, 0.6).unwrap()
        };
        assert!(mra("5.5"));
        assert!(!mra("6.0"), "mra exactly 0.6 must not pass");
        assert!(!mra("6.5"));
    }

    // ------------------------------------------------------------------
    // Mock judge
    // ------------------------------------------------------------------

    #[test]
    fn mock_judge_takes_the_last_mention() {
        let judge = MockJudge;
        let extract = |think: &str, qtype| {
            judge_extract_answer("q", think, qtype, &judge, 0)
        };
        assert_eq!(
            extract("Since the count is 4, so the answer is B.", QuestionType::MultipleChoice),
            Some(choice('B'))
        );
        assert_eq!(
            extract("maybe A, no, C is right", QuestionType::MultipleChoice),
            Some(choice('C'))
        );
        assert_eq!(
            extract("Since the count is 4, so the answer is B.", QuestionType::Math),
            Some(number(4.0))
        );
        assert_eq!(extract("", QuestionType::MultipleChoice), None);
        assert_eq!(extract("   ", QuestionType::Math), None);
        assert_eq!(extract("no conclusion here", QuestionType::MultipleChoice), None);
    }

    #[test]
    fn mock_judge_rule_corpus() {
        // Hand-labeled corpus for the last-mention rule. Expected values were
        // worked out from the rule statement, not by running the judge.
        let mc_cases: Vec<(&str, Option<char>)> = vec![
            ("The answer is B", Some('B')),
            ("The answer is B.", Some('B')),
            ("A or B? I pick A", Some('A')),
            ("(C) looks right", Some('C')),
            ("first D, then C, finally A", Some('A')),
            ("options: A B C D", Some('D')),
            ("$B$ fits", Some('B')),
            ("b lowercase is not standalone-counted", None),
            ("ABCD run together", None),
            ("the grade was an F", Some('F')),
            ("H is the last valid letter", Some('H')),
            ("I comes after H and does not count", Some('H')),
            ("nothing conclusive", None),
            ("B!", Some('B')),
            ("ends with E", Some('E')),
        ];
        for (think, expected) in mc_cases {
            let got = judge_extract_answer("q", think, QuestionType::MultipleChoice, &MockJudge, 0);
            assert_eq!(got, expected.map(choice), "on {think:?}");
        }

        let numeric_cases: Vec<(&str, Option<f64>)> = vec![
            ("count is 4", Some(4.0)),
            ("4 then 7", Some(7.0)),
            ("roughly 3.5 meters", Some(3.5)),
            ("3/4 of the span", Some(0.75)),
            ("50% of it", Some(0.5)),
            ("-2 degrees", Some(-2.0)),
            ("value: $8$", Some(8.0)),
            ("about 12, maybe 13,", Some(13.0)),
            ("a5 is a cell name, then 9.", Some(9.0)),
            ("no digits at all", None),
            ("1e2 in scientific form", Some(100.0)),
            ("the 1st item", None),
            ("7 wait no", Some(7.0)),
            ("answer 0", Some(0.0)),
            ("2.", Some(2.0)),
        ];
        for (think, expected) in numeric_cases {
            let got = judge_extract_answer("q", think, QuestionType::Math, &MockJudge, 0);
            assert_eq!(got, expected.map(number), "on {think:?}");
        }
    }

    struct FlakyJudge {
        fail_first: std::cell::Cell<u32>,
    }

    // Test-only: the cell is fine because the test is single-threaded.
    unsafe impl Sync for FlakyJudge {}

    impl JudgeBackend for FlakyJudge {
        fn extract_answer(
            &self,
            _q: &str,
            think: &str,
            qtype: QuestionType,
        ) -> std::result::Result<String, BackendFailure> {
            if self.fail_first.get() > 0 {
                self.fail_first.set(self.fail_first.get() - 1);
                return Err(BackendFailure::Transport("connection reset".into()));
            }
            MockJudge.extract_answer("", think, qtype)
        }
    }

    #[test]
    fn transport_failures_are_retried_then_degrade() {
        let judge = FlakyJudge { fail_first: std::cell::Cell::new(2) };
        let got = judge_extract_answer("q", "answer is B", QuestionType::MultipleChoice, &judge, 2);
        assert_eq!(got, Some(choice('B')), "succeeds on the third attempt");

        let judge = FlakyJudge { fail_first: std::cell::Cell::new(3) };
        let got = judge_extract_answer("q", "answer is B", QuestionType::MultipleChoice, &judge, 2);
        assert_eq!(got, None, "retries exhausted");
    }

    // ------------------------------------------------------------------
    // consistency_check
    // ------------------------------------------------------------------

    #[test]
    fn consistency_truth_table() {
        let gt = choice('B');
        let check = |extracted: Option<char>, final_answer: Option<char>| {
            let e = extracted.map(choice);
            let f = final_answer.map(choice);
            consistency_check(e.as_ref(), f.as_ref(), &gt)
        };
        assert_eq!(check(Some('B'), Some('B')), Consistency::Consistent);
        assert_eq!(check(Some('C'), Some('C')), Consistency::Consistent, "agreeing and both wrong");
        assert_eq!(check(Some('B'), Some('C')), Consistency::ThinkRightAnswerWrong);
        assert_eq!(check(Some('C'), Some('B')), Consistency::ThinkWrongAnswerRight);
        assert_eq!(check(Some('C'), Some('D')), Consistency::BothWrong);
        assert_eq!(check(None, Some('B')), Consistency::Unknown);
        assert_eq!(check(None, None), Consistency::Unknown);
        // Missing final answer counts as wrong.
        assert_eq!(check(Some('B'), None), Consistency::ThinkRightAnswerWrong);
        assert_eq!(check(Some('C'), None), Consistency::BothWrong);
    }

    #[test]
    fn near_tolerance_numbers_stay_consistent() {
        // Extracted and final are each within tolerance of 5.0 but not of
        // each other; both-right wins.
        let gt = number(5.0);
        let e = number(5.0 - 7e-7);
        let f = number(5.0 + 7e-7);
        assert!(!e.equivalent(&f));
        assert_eq!(consistency_check(Some(&e), Some(&f), &gt), Consistency::Consistent);
    }

    // ------------------------------------------------------------------
    // detect_repetition
    // ------------------------------------------------------------------

    #[test]
    fn repetition_spot_cases() {
        let (flag, offending) =
            detect_repetition("The cat sits on the red mat. The cat sits on the red mat.", 15, 2);
        assert!(flag);
        assert_eq!(offending, vec!["the cat sits on the red mat".to_string()]);

        let (flag, offending) = detect_repetition("Yes. Yes. Yes.", 15, 2);
        assert!(!flag, "below the length floor");
        assert!(offending.is_empty());

        assert_eq!(detect_repetition("", 15, 2), (false, vec![]));
        let (flag, _) =
            detect_repetition("All different sentences here. Nothing repeats in this text.", 15, 2);
        assert!(!flag);
    }

    #[test]
    fn repetition_normalizes_before_comparing() {
        // Case, punctuation, and spacing differences collapse.
        let think = "The Cat Sits On The Red Mat!\nthe cat   sits on the red mat.";
        let (flag, offending) = detect_repetition(think, 15, 2);
        assert!(flag);
        assert_eq!(offending, vec!["the cat sits on the red mat".to_string()]);
    }

    #[test]
    fn repetition_matches_brute_force_oracle() {
        // Independent duplicate counter over normalized sentences.
        fn oracle(think: &str, min_chars: usize, min_count: usize) -> Vec<String> {
            let sentences: Vec<String> = think
                .split(['.', '!', '?', '\n'])
                .map(super::normalize_sentence)
                .filter(|s| s.chars().count() >= min_chars)
                .collect();
            let mut repeated: Vec<String> = sentences
                .iter()
                .filter(|s| sentences.iter().filter(|t| t == s).count() >= min_count)
                .cloned()
                .collect();
            repeated.sort();
            repeated.dedup();
            repeated
        }
        let cases = [
            "one sentence repeated twice here. one sentence repeated twice here. filler.",
            "alpha beta gamma delta. epsilon zeta eta theta. alpha beta gamma delta.",
            "short. short. a much longer sentence appears once.",
            "triple repeat of this long line! triple repeat of this long line? triple repeat of this long line.",
            "",
        ];
        for think in cases {
            let (flag, offending) = detect_repetition(think, 15, 2);
            let expected = oracle(think, 15, 2);
            assert_eq!(offending, expected, "on {think:?}");
            assert_eq!(flag, !expected.is_empty());
        }
    }

    proptest! {
        // Permuting sentence order never changes the verdict.
        #[test]
        fn repetition_is_order_invariant(
            mut sentences in proptest::collection::vec("[a-c ]{0,25}", 0..8),
            rotation in 0usize..8,
        ) {
            let original = sentences.join(". ");
            let (flag_a, off_a) = detect_repetition(&original, 15, 2);
            if !sentences.is_empty() {
                let rot = rotation % sentences.len();
                sentences.rotate_left(rot);
            }
            let rotated = sentences.join(". ");
            let (flag_b, off_b) = detect_repetition(&rotated, 15, 2);
            prop_assert_eq!(flag_a, flag_b);
            prop_assert_eq!(off_a, off_b);
        }
    }

    // ------------------------------------------------------------------
    // verify_rollout
    // ------------------------------------------------------------------

    #[test]
    fn full_report_for_a_clean_rollout() {
        let report = verify_rollout(
            "<think>we check carefully, the answer is B</think><answer>$B$</answer>",
            "which option?",
            &choice('B'),
            QuestionType::MultipleChoice,
            &MockJudge,
            &VerifierConfig::default(),
        )
        .unwrap();
        assert!(report.accuracy_pass);
        assert_eq!(report.extracted_reasoning_answer, Some(choice('B')));
        assert_eq!(report.consistency, Consistency::Consistent);
        assert!(!report.repetition_flag);
        assert_eq!(report.think_length_tokens, 7);
        assert!(report.is_positive_candidate());
    }

    #[test]
    fn inconsistent_think_is_reported_even_when_answer_is_right() {
        let report = verify_rollout(
            "<think>clearly C is correct</think><answer>$B$</answer>",
            "q",
            &choice('B'),
            QuestionType::MultipleChoice,
            &MockJudge,
            &VerifierConfig::default(),
        )
        .unwrap();
        assert!(report.accuracy_pass);
        assert_eq!(report.consistency, Consistency::ThinkWrongAnswerRight);
        assert!(!report.is_positive_candidate());
    }

    #[test]
    fn repetition_flag_is_independent_of_accuracy() {
        let think = "the answer must be B because of this long argument. \
                     the answer must be B because of this long argument.";
        let report = verify_rollout(
            &format!("<think>{think}</think><answer>$B$</answer>"),
            "q",
            &choice('B'),
            QuestionType::MultipleChoice,
            &MockJudge,
            &VerifierConfig::default(),
        )
        .unwrap();
        assert!(report.accuracy_pass);
        assert!(report.repetition_flag);
        assert!(!report.is_positive_candidate());
    }

    #[test]
    fn missing_think_degrades_to_unknown() {
        let report = verify_rollout(
            "<answer>$B$</answer>",
            "q",
            &choice('B'),
            QuestionType::MultipleChoice,
            &MockJudge,
            &VerifierConfig::default(),
        )
        .unwrap();
        assert_eq!(report.consistency, Consistency::Unknown);
        assert_eq!(report.think_length_tokens, 0);
        assert!(!report.is_positive_candidate());
    }

    #[test]
    fn verify_rollout_is_deterministic() {
        let args = (
            "<think>maybe A, no, C</think><answer>$C$</answer>",
            "q",
            choice('C'),
            QuestionType::MultipleChoice,
        );
        let run = || {
            verify_rollout(args.0, args.1, &args.2, args.3, &MockJudge, &VerifierConfig::default())
                .unwrap()
        };
        assert_eq!(run(), run());
    }
}

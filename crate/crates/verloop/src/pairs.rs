//! Preference-pair construction from verified rollout groups.
//!
//! Prompts are categorized by their group's average accuracy reward, then
//! each applicable strategy contributes at most a capped number of pairs:
//! longest-positive vs incorrect, anti-repetition, reflective concatenation,
//! reasoning/answer consistency repair, and oracle augmentation for prompts
//! the policy never gets right. Every chosen side must pass the verifier's
//! positive-candidate predicate; constructed chosens are re-verified rather
//! than trusted.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{self, CanonicalAnswer, QuestionType};
use crate::grpo::RolloutGroup;
use crate::seeding::derive_seed;
use crate::task::Prompt;
use crate::verifier::{
    self, BackendFailure, Consistency, JudgeBackend, VerifierConfig, VerifierReport,
};

/// Whitespace-token cap applied to the rejected side of repetition pairs.
pub const REPETITION_TRUNCATION_TOKENS: usize = 1024;

/// How a preference pair was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    SingleTurn,
    RepetitionPenalty,
    Reflective,
    InferenceConsistency,
    HardOracle,
}

/// One contrastive training example. `chosen` always passes the tag grammar;
/// `rejected` may be malformed only for [`PairStrategy::RepetitionPenalty`],
/// where truncation can cut the closing tags (recorded in metadata).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub chosen: String,
    pub rejected: String,
    pub strategy: PairStrategy,
    /// Provenance: source rollout indices, truncation facts, oracle attempt
    /// counts. String-to-string so the record serializes deterministically.
    pub metadata: BTreeMap<String, String>,
}

impl PreferencePair {
    /// Structural invariants every stored pair must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(Error::InvalidInput(format!(
                "pair for {} has identical chosen and rejected text",
                self.prompt_id
            )));
        }
        if !extraction::check_format(&self.chosen) {
            return Err(Error::InvalidInput(format!(
                "pair for {} has a malformed chosen response",
                self.prompt_id
            )));
        }
        if self.strategy != PairStrategy::RepetitionPenalty
            && !extraction::check_format(&self.rejected)
        {
            return Err(Error::InvalidInput(format!(
                "pair for {} ({:?}) has a malformed rejected response",
                self.prompt_id, self.strategy
            )));
        }
        Ok(())
    }
}

/// Difficulty band of a prompt, from its group's average accuracy reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCategory {
    /// Average accuracy exactly 1: mastered, contributes no pairs.
    Simple,
    /// Average accuracy exactly 0: never solved, oracle territory.
    Hard,
    /// Average accuracy in (0, 0.25].
    LowAccuracy,
    /// Average accuracy in (0.25, 1).
    Mixed,
}

/// Band a group by average accuracy. Uses the accuracy component only; the
/// format bonus never makes a prompt look easier.
pub fn categorize(group: &RolloutGroup) -> PromptCategory {
    let avg = group.avg_accuracy;
    if avg >= 1.0 {
        PromptCategory::Simple
    } else if avg <= 0.0 {
        PromptCategory::Hard
    } else if avg <= 0.25 {
        PromptCategory::LowAccuracy
    } else {
        PromptCategory::Mixed
    }
}

/// Produces a long, correct, fully tagged reasoning response for a question
/// the policy keeps failing. Output is never trusted: callers re-verify
/// format, accuracy, consistency, and non-repetition before use.
pub trait OracleProvider: Send + Sync {
    fn generate_response(
        &self,
        question: &str,
        ground_truth: &CanonicalAnswer,
        qtype: QuestionType,
    ) -> std::result::Result<String, BackendFailure>;
}

/// Deterministic oracle for tests and offline runs: a templated multi-step
/// think (distinct sentences, so it never trips the repetition detector)
/// that states the answer first and last, then the tagged answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockOracle;

impl OracleProvider for MockOracle {
    fn generate_response(
        &self,
        _question: &str,
        ground_truth: &CanonicalAnswer,
        _qtype: QuestionType,
    ) -> std::result::Result<String, BackendFailure> {
        let answer = ground_truth.render();
        // The answer appears only once, at the very end: stating it early
        // would let a low-order learner imitate a "state answer, stop"
        // shortcut instead of the long verification chain.
        let think = format!(
            "we check carefully step by step . so we compute the value . \
             wait let me reconsider because the previous reasoning was wrong . \
             then we check step by step . therefore the answer is {answer}"
        );
        Ok(tagged_response(&think, &answer))
    }
}

/// One prompt's verified group: the inputs every strategy consumes.
#[derive(Debug, Clone, Copy)]
pub struct GroupContext<'a> {
    pub prompt: &'a Prompt,
    pub group: &'a RolloutGroup,
    pub reports: &'a [VerifierReport],
}

impl<'a> GroupContext<'a> {
    pub fn new(
        prompt: &'a Prompt,
        group: &'a RolloutGroup,
        reports: &'a [VerifierReport],
    ) -> Result<Self> {
        if prompt.id != group.prompt_id {
            return Err(Error::InvalidInput(format!(
                "prompt {} paired with group for {}",
                prompt.id, group.prompt_id
            )));
        }
        if reports.len() != group.group_size() {
            return Err(Error::InvalidInput(format!(
                "group {} has {} rollouts but {} reports",
                group.prompt_id,
                group.group_size(),
                reports.len()
            )));
        }
        Ok(Self { prompt, group, reports })
    }

    pub fn category(&self) -> PromptCategory {
        categorize(self.group)
    }

    fn text(&self, index: usize) -> &str {
        &self.group.rollouts[index].text
    }

    /// Rollouts usable as a chosen side: positive candidates whose full text
    /// also passes the tag grammar (a rollout can answer correctly through
    /// the first tag span while the overall format is broken).
    fn eligible_chosen_indices(&self) -> Vec<usize> {
        (0..self.group.group_size())
            .filter(|&i| {
                self.reports[i].is_positive_candidate() && extraction::check_format(self.text(i))
            })
            .collect()
    }

    /// The chosen side shared by selection strategies: maximum think length,
    /// ties broken toward the lowest rollout index.
    fn longest_eligible(&self) -> Option<usize> {
        self.eligible_chosen_indices()
            .into_iter()
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if self.reports[i].think_length_tokens
                    <= self.reports[b].think_length_tokens =>
                {
                    Some(b)
                }
                _ => Some(i),
            })
    }

    /// Rollouts that failed the accuracy bar.
    fn incorrect_indices(&self) -> Vec<usize> {
        (0..self.group.group_size()).filter(|&i| !self.reports[i].accuracy_pass).collect()
    }

    /// Incorrect rollouts that can serve as a well-formed rejected side.
    fn incorrect_wellformed_indices(&self) -> Vec<usize> {
        self.incorrect_indices()
            .into_iter()
            .filter(|&i| extraction::check_format(self.text(i)))
            .collect()
    }
}

/// The knobs of dataset assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    /// Maximum pairs per strategy per prompt per iteration; 0 disables the
    /// strategy.
    pub per_strategy_cap: usize,
    /// Whitespace-token cap for repetition-pair rejected sides.
    pub max_rejected_tokens: usize,
    /// Extra oracle attempts after a failed generation or re-verification.
    pub oracle_retries: u32,
    /// Connectives inserted between concatenated think sections. Restricted
    /// to policy-vocabulary words so reflective pairs tokenize without
    /// unknown-token collapse.
    pub phrase_pool: Vec<String>,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            per_strategy_cap: 1,
            max_rejected_tokens: REPETITION_TRUNCATION_TOKENS,
            oracle_retries: 2,
            phrase_pool: default_phrase_pool(),
        }
    }
}

/// The fixed, versioned reflective-connective list.
pub fn default_phrase_pool() -> Vec<String> {
    [
        "wait let me reconsider .",
        "wait the previous reasoning was wrong .",
        "let me check the previous step .",
        "so we check the value carefully .",
        "wait we compute the answer step by step .",
        "the previous reasoning was wrong so we reconsider .",
        "let me reconsider the previous value .",
        "wait let me compute carefully .",
    ]
    .into_iter()
    .map(str::to_owned)
    .collect()
}

fn tagged_response(think: &str, answer: &str) -> String {
    format!(
        "{} {} {} {} {} {}",
        extraction::THINK_OPEN,
        think.trim(),
        extraction::THINK_CLOSE,
        extraction::ANSWER_OPEN,
        answer.trim(),
        extraction::ANSWER_CLOSE
    )
}

/// Whether a text fragment can be embedded inside a tag section without
/// breaking the one-pair-of-each-tag grammar.
fn tag_free(text: &str) -> bool {
    ![
        extraction::THINK_OPEN,
        extraction::THINK_CLOSE,
        extraction::ANSWER_OPEN,
        extraction::ANSWER_CLOSE,
    ]
    .iter()
    .any(|tag| text.contains(tag))
}

/// Think and answer sections of a rollout, when both exist and can be safely
/// re-embedded in constructed responses.
fn embeddable_sections(text: &str) -> Option<(String, String)> {
    let parsed = extraction::extract_sections(text);
    let think = parsed.think?;
    let answer = parsed.answer_raw?;
    (tag_free(&think) && tag_free(&answer)).then_some((think, answer))
}

/// Re-verify a constructed chosen response: it must pass the tag grammar and
/// the full positive-candidate predicate under the same judge that will
/// score training rollouts.
fn chosen_survives_reverification(
    text: &str,
    ctx: &GroupContext,
    judge: &dyn JudgeBackend,
    config: &VerifierConfig,
) -> Result<bool> {
    if !extraction::check_format(text) {
        return Ok(false);
    }
    let report = verifier::verify_rollout(
        text,
        &ctx.prompt.question,
        &ctx.prompt.ground_truth,
        ctx.prompt.qtype,
        judge,
        config,
    )?;
    Ok(report.is_positive_candidate())
}

fn pair(
    ctx: &GroupContext,
    strategy: PairStrategy,
    chosen: String,
    rejected: String,
    metadata: BTreeMap<String, String>,
) -> Option<PreferencePair> {
    (chosen != rejected).then(|| PreferencePair {
        prompt_id: ctx.prompt.id.clone(),
        chosen,
        rejected,
        strategy,
        metadata,
    })
}

/// Longest verified-correct rollout vs a uniformly random well-formed
/// incorrect one. Applies to prompts the policy partially solves.
pub fn build_single_turn(ctx: &GroupContext, rng: &mut impl Rng) -> Option<PreferencePair> {
    if !matches!(ctx.category(), PromptCategory::Mixed | PromptCategory::LowAccuracy) {
        return None;
    }
    let chosen_index = ctx.longest_eligible()?;
    let rejected_index = *ctx.incorrect_wellformed_indices().choose(rng)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("chosen_index".into(), chosen_index.to_string());
    metadata.insert(
        "chosen_think_tokens".into(),
        ctx.reports[chosen_index].think_length_tokens.to_string(),
    );
    metadata.insert("rejected_index".into(), rejected_index.to_string());
    pair(
        ctx,
        PairStrategy::SingleTurn,
        ctx.text(chosen_index).to_owned(),
        ctx.text(rejected_index).to_owned(),
        metadata,
    )
}

/// Longest verified-correct rollout vs the first repetition-flagged rollout,
/// truncated to `max_tokens` whitespace tokens. Truncation may cut the
/// closing tags; that is the point of the penalty and is recorded.
pub fn build_repetition_pair(ctx: &GroupContext, max_tokens: usize) -> Option<PreferencePair> {
    let rejected_index = (0..ctx.group.group_size()).find(|&i| ctx.reports[i].repetition_flag)?;
    let chosen_index = ctx.longest_eligible()?;

    let words: Vec<&str> = ctx.text(rejected_index).split_whitespace().collect();
    let truncated = words.len() > max_tokens;
    let rejected = words[..words.len().min(max_tokens)].join(" ");

    let mut metadata = BTreeMap::new();
    metadata.insert("chosen_index".into(), chosen_index.to_string());
    metadata.insert("rejected_index".into(), rejected_index.to_string());
    metadata.insert("rejected_original_tokens".into(), words.len().to_string());
    metadata.insert("truncated".into(), truncated.to_string());
    pair(
        ctx,
        PairStrategy::RepetitionPenalty,
        ctx.text(chosen_index).to_owned(),
        rejected,
        metadata,
    )
}

/// Reflective pair for low-accuracy prompts. The rejected side chains two
/// incorrect think sections with a connective and keeps the second wrong
/// answer; the chosen side chains one incorrect think, a connective, and the
/// best correct think, ending on the correct answer, teaching the
/// self-correction move.
pub fn build_reflective_pair(
    ctx: &GroupContext,
    rng: &mut impl Rng,
    phrase_pool: &[String],
    judge: &dyn JudgeBackend,
    config: &VerifierConfig,
) -> Result<Option<PreferencePair>> {
    if ctx.category() != PromptCategory::LowAccuracy || phrase_pool.is_empty() {
        return Ok(None);
    }
    // Incorrect rollouts whose sections can be re-embedded verbatim.
    let incorrect: Vec<(usize, String, String)> = ctx
        .incorrect_indices()
        .into_iter()
        .filter_map(|i| embeddable_sections(ctx.text(i)).map(|(t, a)| (i, t, a)))
        .collect();
    let correct_index = match ctx.longest_eligible() {
        Some(i) => i,
        None => return Ok(None),
    };
    if incorrect.len() < 2 {
        return Ok(None);
    }
    let Some((correct_think, correct_answer)) = embeddable_sections(ctx.text(correct_index))
    else {
        return Ok(None);
    };

    // Two distinct incorrect rollouts for the rejected chain, drawn as an
    // ordered pair; the second one's answer closes the chain.
    let first_slot = rng.gen_range(0..incorrect.len());
    let mut remaining: Vec<usize> = (0..incorrect.len()).filter(|&p| p != first_slot).collect();
    let second_slot = remaining.swap_remove(rng.gen_range(0..remaining.len()));
    let (first_index, first_think, _) = &incorrect[first_slot];
    let (second_index, second_think, second_answer) = &incorrect[second_slot];
    let rejected_phrase = phrase_pool.choose(rng).expect("non-empty pool");
    let rejected = tagged_response(
        &format!("{} {} {}", first_think.trim(), rejected_phrase, second_think.trim()),
        second_answer,
    );

    // One incorrect think, a connective, then the correct reasoning.
    let lead_slot = rng.gen_range(0..incorrect.len());
    let (lead_index, lead_think, _) = &incorrect[lead_slot];
    let chosen_phrase = phrase_pool.choose(rng).expect("non-empty pool");
    let chosen = tagged_response(
        &format!("{} {} {}", lead_think.trim(), chosen_phrase, correct_think.trim()),
        &correct_answer,
    );

    if !extraction::check_format(&rejected)
        || !chosen_survives_reverification(&chosen, ctx, judge, config)?
    {
        return Ok(None);
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("correct_index".into(), correct_index.to_string());
    metadata.insert("chosen_lead_index".into(), lead_index.to_string());
    metadata.insert("rejected_indices".into(), format!("{first_index},{second_index}"));
    Ok(pair(ctx, PairStrategy::Reflective, chosen, rejected, metadata))
}

/// Pairs that repair reasoning/answer mismatches. A rollout that reasons to
/// the right answer but writes a different one is rejected in favor of its
/// own think closed with the reasoned answer; a rollout that lucks into the
/// right answer with wrong reasoning is rejected in favor of a random
/// verified-consistent sibling.
pub fn build_consistency_pairs(
    ctx: &GroupContext,
    rng: &mut impl Rng,
    judge: &dyn JudgeBackend,
    config: &VerifierConfig,
) -> Result<Vec<PreferencePair>> {
    let eligible = ctx.eligible_chosen_indices();
    let mut pairs = Vec::new();
    for index in 0..ctx.group.group_size() {
        let report = &ctx.reports[index];
        // The original rollout becomes the rejected side, so it must be
        // well-formed here (only repetition pairs may carry malformed text).
        if !extraction::check_format(ctx.text(index)) {
            continue;
        }
        match report.consistency {
            Consistency::ThinkRightAnswerWrong => {
                let Some(extracted) = report.extracted_reasoning_answer.clone() else {
                    continue;
                };
                let Some((think, _)) = embeddable_sections(ctx.text(index)) else {
                    continue;
                };
                let chosen = tagged_response(&think, &extracted.render());
                if !chosen_survives_reverification(&chosen, ctx, judge, config)? {
                    continue;
                }
                let mut metadata = BTreeMap::new();
                metadata.insert("kind".into(), "think_right_answer_wrong".into());
                metadata.insert("rejected_index".into(), index.to_string());
                metadata.insert("reasoning_answer".into(), extracted.render());
                pairs.extend(pair(
                    ctx,
                    PairStrategy::InferenceConsistency,
                    chosen,
                    ctx.text(index).to_owned(),
                    metadata,
                ));
            }
            Consistency::ThinkWrongAnswerRight => {
                let Some(&sibling) = eligible
                    .iter()
                    .filter(|&&j| j != index)
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .copied()
                else {
                    continue;
                };
                let mut metadata = BTreeMap::new();
                metadata.insert("kind".into(), "think_wrong_answer_right".into());
                metadata.insert("rejected_index".into(), index.to_string());
                metadata.insert("chosen_index".into(), sibling.to_string());
                pairs.extend(pair(
                    ctx,
                    PairStrategy::InferenceConsistency,
                    ctx.text(sibling).to_owned(),
                    ctx.text(index).to_owned(),
                    metadata,
                ));
            }
            _ => {}
        }
    }
    Ok(pairs)
}

/// Oracle augmentation for prompts with zero average accuracy: a re-verified
/// oracle response vs a uniformly random well-formed rollout. Transport
/// failures and re-verification failures both consume a retry.
pub fn build_hard_oracle_pair(
    ctx: &GroupContext,
    rng: &mut impl Rng,
    oracle: &dyn OracleProvider,
    judge: &dyn JudgeBackend,
    config: &VerifierConfig,
    retries: u32,
) -> Result<Option<PreferencePair>> {
    if ctx.category() != PromptCategory::Hard {
        return Ok(None);
    }
    let wellformed: Vec<usize> = (0..ctx.group.group_size())
        .filter(|&i| extraction::check_format(ctx.text(i)))
        .collect();
    let Some(&rejected_index) = wellformed.choose(rng) else {
        return Ok(None);
    };

    for attempt in 0..=retries {
        let text = match oracle.generate_response(
            &ctx.prompt.question,
            &ctx.prompt.ground_truth,
            ctx.prompt.qtype,
        ) {
            Ok(text) => text,
            Err(BackendFailure::Extraction) => {
                log::warn!("oracle produced no response for {}", ctx.prompt.id);
                return Ok(None);
            }
            Err(BackendFailure::Transport(reason)) => {
                log::warn!(
                    "oracle transport failure for {} (attempt {attempt}): {reason}",
                    ctx.prompt.id
                );
                continue;
            }
        };
        if chosen_survives_reverification(&text, ctx, judge, config)? {
            let mut metadata = BTreeMap::new();
            metadata.insert("oracle_attempts".into(), (attempt + 1).to_string());
            metadata.insert("rejected_index".into(), rejected_index.to_string());
            return Ok(pair(
                ctx,
                PairStrategy::HardOracle,
                text,
                ctx.text(rejected_index).to_owned(),
                metadata,
            ));
        }
        log::warn!(
            "oracle response for {} failed re-verification (attempt {attempt})",
            ctx.prompt.id
        );
    }
    Ok(None)
}

/// Build the full preference dataset for one iteration. Groups are processed
/// in input order; per prompt, strategies run in a fixed order with their
/// own capped contribution, drawing randomness from a per-prompt stream so
/// the result is independent of scheduling. Byte-identical (chosen,
/// rejected) pairs for the same prompt are deduplicated, first strategy
/// wins. Simple prompts contribute nothing.
#[allow(clippy::too_many_arguments)]
pub fn assemble_dataset(
    prompts: &[Prompt],
    groups: &[RolloutGroup],
    reports: &[Vec<VerifierReport>],
    config: &PairConfig,
    verifier_config: &VerifierConfig,
    judge: &dyn JudgeBackend,
    oracle: &dyn OracleProvider,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if groups.len() != reports.len() {
        return Err(Error::InvalidInput(format!(
            "{} groups but {} report lists",
            groups.len(),
            reports.len()
        )));
    }
    let by_id: HashMap<&str, &Prompt> = prompts.iter().map(|p| (p.id.as_str(), p)).collect();
    let cap = config.per_strategy_cap;
    let mut dataset = Vec::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();

    for (group, group_reports) in groups.iter().zip(reports) {
        let prompt = by_id.get(group.prompt_id.as_str()).copied().ok_or_else(|| {
            Error::Data(format!("rollout group references unknown prompt {}", group.prompt_id))
        })?;
        let ctx = GroupContext::new(prompt, group, group_reports)?;
        if ctx.category() == PromptCategory::Simple || cap == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["pairs", &prompt.id]));

        let mut candidates: Vec<PreferencePair> = Vec::new();
        candidates.extend(build_single_turn(&ctx, &mut rng));
        candidates.extend(build_repetition_pair(&ctx, config.max_rejected_tokens));
        candidates.extend(build_reflective_pair(
            &ctx,
            &mut rng,
            &config.phrase_pool,
            judge,
            verifier_config,
        )?);
        candidates.extend(
            build_consistency_pairs(&ctx, &mut rng, judge, verifier_config)?
                .into_iter()
                .take(cap),
        );
        candidates.extend(build_hard_oracle_pair(
            &ctx,
            &mut rng,
            oracle,
            judge,
            verifier_config,
            config.oracle_retries,
        )?);

        for candidate in candidates {
            let key = (
                candidate.prompt_id.clone(),
                candidate.chosen.clone(),
                candidate.rejected.clone(),
            );
            if seen.insert(key) {
                dataset.push(candidate);
            }
        }
    }
    Ok(dataset)
}

// ---------------------------------------------------------------------------

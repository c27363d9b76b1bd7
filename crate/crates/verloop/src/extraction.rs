//! Response parsing: `<think>...</think><answer>...</answer>` sections and
//! answer normalization.
//!
//! A well-formed response starts with `<think>` and ends with `</answer>`,
//! contains exactly one well-nested pair of each tag in that order, and has
//! nothing but whitespace between `</think>` and `<answer>`. Parsing is total:
//! malformed input yields absent sections, never an error.

use serde::{Deserialize, Serialize};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Absolute tolerance for numeric answer equivalence.
pub const NUMBER_TOLERANCE: f64 = 1e-6;

/// The kind of question a dataset item poses. Supplied by the dataset
/// record, never inferred from text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Math,
    MultipleChoice,
    DistanceEstimation,
}

/// Result of splitting a raw response into its tagged sections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    /// Inner text of the first `<think>...</think>` span, if present.
    pub think: Option<String>,
    /// Inner text of the first `<answer>...</answer>` span, if present.
    pub answer_raw: Option<String>,
    /// Whether the full response matches the tag grammar.
    pub format_ok: bool,
}

/// Normal form an answer is reduced to before comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
#[serde(rename_all = "snake_case")]
pub enum CanonicalAnswer {
    /// A multiple-choice option, always an uppercase letter in A..H.
    Choice(char),
    /// A finite numeric value (decimal, integer, fraction, or percentage).
    Number(f64),
    /// Lowercased, whitespace-collapsed free text; fallback when a
    /// math/distance answer is not numeric.
    Text(String),
}

impl CanonicalAnswer {
    /// Equivalence used by the accuracy reward: numeric values compare with
    /// absolute tolerance [`NUMBER_TOLERANCE`], everything else exactly.
    pub fn equivalent(&self, other: &CanonicalAnswer) -> bool {
        match (self, other) {
            (CanonicalAnswer::Choice(a), CanonicalAnswer::Choice(b)) => a == b,
            (CanonicalAnswer::Number(a), CanonicalAnswer::Number(b)) => {
                (a - b).abs() <= NUMBER_TOLERANCE
            }
            (CanonicalAnswer::Text(a), CanonicalAnswer::Text(b)) => a == b,
            _ => false,
        }
    }

    /// Render back to answer text. Round-trips through [`normalize_answer`].
    pub fn render(&self) -> String {
        match self {
            CanonicalAnswer::Choice(c) => c.to_string(),
            CanonicalAnswer::Number(v) => format!("{v}"),
            CanonicalAnswer::Text(t) => t.clone(),
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            CanonicalAnswer::Number(v) => Some(*v),
            _ => None,
        }
    }
}

fn find_all(haystack: &str, needle: &str) -> Vec<usize> {
    haystack.match_indices(needle).map(|(i, _)| i).collect()
}

/// True iff the response matches the full tag grammar: after trimming outer
/// whitespace it begins with `<think>`, ends with `</answer>`, contains
/// exactly one occurrence of each tag pair in order, and only whitespace
/// separates `</think>` from `<answer>`.
pub fn check_format(response: &str) -> bool {
    let trimmed = response.trim();
    if !trimmed.starts_with(THINK_OPEN) || !trimmed.ends_with(ANSWER_CLOSE) {
        return false;
    }
    let think_open = find_all(trimmed, THINK_OPEN);
    let think_close = find_all(trimmed, THINK_CLOSE);
    let answer_open = find_all(trimmed, ANSWER_OPEN);
    let answer_close = find_all(trimmed, ANSWER_CLOSE);
    if think_open.len() != 1
        || think_close.len() != 1
        || answer_open.len() != 1
        || answer_close.len() != 1
    {
        return false;
    }
    let (to, tc, ao, ac) = (think_open[0], think_close[0], answer_open[0], answer_close[0]);
    if to + THINK_OPEN.len() > tc || tc + THINK_CLOSE.len() > ao || ao + ANSWER_OPEN.len() > ac {
        return false;
    }
    trimmed[tc + THINK_CLOSE.len()..ao].trim().is_empty()
}

fn inner_span<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(&text[start..end])
}

/// Split a response into think/answer sections. Total over arbitrary input:
/// absent or unclosed spans yield absent fields. Only the first occurrence
/// of each tag pair is honored.
pub fn extract_sections(response: &str) -> ParsedResponse {
    ParsedResponse {
        think: inner_span(response, THINK_OPEN, THINK_CLOSE).map(str::to_owned),
        answer_raw: inner_span(response, ANSWER_OPEN, ANSWER_CLOSE).map(str::to_owned),
        format_ok: check_format(response),
    }
}

/// Strip surrounding `$...$`, whitespace, and trailing punctuation, repeating
/// until stable ("$B$." needs two rounds).
pub(crate) fn strip_wrapping(raw: &str) -> &str {
    let mut s = raw.trim();
    loop {
        let before = s;
        if s.len() >= 2 && s.starts_with('$') && s.ends_with('$') {
            s = s[1..s.len() - 1].trim();
        }
        if let Some(last) = s.chars().last() {
            if matches!(last, '.' | ',' | ';' | ':' | '!' | '?') {
                s = s[..s.len() - last.len_utf8()].trim_end();
            }
        }
        if s == before {
            return s;
        }
    }
}

/// Standalone uppercase choice letters (A..H) in reading order. A letter is
/// standalone when neither neighbor is alphanumeric.
pub(crate) fn choice_letters(text: &str) -> Vec<char> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        if !('A'..='H').contains(&c) {
            continue;
        }
        let prev_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let next_ok = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        if prev_ok && next_ok {
            out.push(c);
        }
    }
    out
}

fn parse_choice(stripped: &str) -> Option<char> {
    let mut chars = stripped.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        let upper = c.to_ascii_uppercase();
        if ('A'..='H').contains(&upper) {
            return Some(upper);
        }
    }
    choice_letters(stripped).first().copied()
}

/// Parse a decimal, integer, simple fraction `p/q`, or percentage. Returns
/// `None` for anything else (including non-finite results).
pub(crate) fn parse_number(text: &str) -> Option<f64> {
    fn finite(v: f64) -> Option<f64> {
        v.is_finite().then_some(v)
    }
    let t = text.trim();
    if t.is_empty() {
        return None;
    }
    if let Some(body) = t.strip_suffix('%') {
        let v: f64 = body.trim().parse().ok()?;
        return finite(v / 100.0);
    }
    if let Some((num, den)) = t.split_once('/') {
        let n: f64 = num.trim().parse().ok()?;
        let d: f64 = den.trim().parse().ok()?;
        if d == 0.0 {
            return None;
        }
        return finite(n / d);
    }
    t.parse().ok().and_then(finite)
}

fn collapse_lower(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reduce raw answer text to its canonical form for the given question type.
///
/// Returns `None` only for a multiple-choice answer containing no letter
/// A..H; callers treat that as a wrong answer, not a failure.
pub fn normalize_answer(raw: &str, qtype: QuestionType) -> Option<CanonicalAnswer> {
    let stripped = strip_wrapping(raw);
    match qtype {
        QuestionType::MultipleChoice => parse_choice(stripped).map(CanonicalAnswer::Choice),
        QuestionType::Math | QuestionType::DistanceEstimation => Some(
            parse_number(stripped)
                .map(CanonicalAnswer::Number)
                .unwrap_or_else(|| CanonicalAnswer::Text(collapse_lower(stripped))),
        ),
    }
}

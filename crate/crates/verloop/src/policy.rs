//! The toy sequence policy: a feature-based softmax over next tokens.
//!
//! Stands in for the full model at desk scale. Logits for the next token are
//! a sum of three weight rows indexed by (previous token, position bucket,
//! prompt class), so the parameter vector stays small enough to check every
//! coordinate with finite differences while still being able to learn the
//! synthetic tasks: emit tagged reasoning, then the answer the prompt class
//! encodes.
//!
//! Parameters are immutable snapshots; updates return a new policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::RewardBreakdown;

pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Response positions are bucketed for the position feature; bucket
/// boundaries every [`POSITION_BUCKET_WIDTH`] tokens, last bucket open-ended.
pub const N_POSITION_BUCKETS: usize = 6;
pub const POSITION_BUCKET_WIDTH: usize = 4;

/// Prompt classes used by the standard task family: 0..3 encode a choice
/// letter A..D, 4..13 a math result digit, 14..23 a distance digit.
pub const N_STANDARD_CLASSES: usize = 24;

/// Token budget of the standard policy, counted after the prompt class.
pub const STANDARD_MAX_LENGTH: usize = 48;

/// One sampled response. `logprobs_old` are the per-token log-probabilities
/// under the parameters that generated it, recorded at temperature 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_id: String,
    pub text: String,
    pub tokens: Vec<u32>,
    pub logprobs_old: Vec<f64>,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    vocab: Vec<String>,
    n_classes: usize,
    max_length: usize,
    /// Row-major `[n_features x vocab_size]` weight matrix.
    theta: Vec<f64>,
}

impl ToyPolicy {
    /// Zero-initialized policy: every next-token distribution is uniform.
    pub fn new(vocab: Vec<String>, n_classes: usize, max_length: usize) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Config("policy vocabulary is empty".into()));
        }
        if n_classes == 0 || max_length == 0 {
            return Err(Error::Config("n_classes and max_length must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for token in &vocab {
            if !seen.insert(token.as_str()) {
                return Err(Error::Config(format!("duplicate vocabulary token {token:?}")));
            }
            if token.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("token {token:?} contains whitespace")));
            }
        }
        let n_features = (vocab.len() + 1) + N_POSITION_BUCKETS + n_classes;
        let theta = vec![0.0; n_features * vocab.len()];
        Ok(Self { vocab, n_classes, max_length, theta })
    }

    /// The task vocabulary: tag tokens, choice letters, digits, connective
    /// words (enough to voice reflection phrases and judge-friendly
    /// reasoning), a period, and the end/unknown markers.
    pub fn standard_vocab() -> Vec<String> {
        let mut vocab: Vec<String> = ["<think>", "</think>", "<answer>", "</answer>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        vocab.extend(["A", "B", "C", "D"].iter().map(|s| s.to_string()));
        vocab.extend((0..10).map(|d| d.to_string()));
        vocab.extend(
            [
                "the", "answer", "is", "so", "we", "check", "then", "therefore", "value",
                "option", "compute", "carefully", "step", "by", "wait", "let", "me",
                "reconsider", "previous", "reasoning", "was", "wrong", "because", ".",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        vocab.push(EOS_TOKEN.to_string());
        vocab.push(UNK_TOKEN.to_string());
        vocab
    }

    /// Standard policy with a structural prior: weights are seeded so sampled
    /// responses mostly follow `<think> words </think> <answer> tok </answer>`
    /// with an uninformed answer token. Models a format-tuned starting model;
    /// which answer to emit per prompt class is left for training to learn.
    pub fn templated(seed: u64) -> Self {
        let mut policy = Self::new(Self::standard_vocab(), N_STANDARD_CLASSES, STANDARD_MAX_LENGTH)
            .expect("standard vocabulary is valid");
        let id = |tok: &str| -> usize {
            policy.token_id(tok).expect("standard vocabulary token") as usize
        };
        let think_open = id("<think>");
        let think_close = id("</think>");
        let answer_open = id("<answer>");
        let answer_close = id("</answer>");
        let eos = id(EOS_TOKEN);
        let unk = id(UNK_TOKEN);
        let period = id(".");
        let answer_tokens: Vec<usize> =
            ["A", "B", "C", "D", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9"]
                .iter()
                .map(|t| id(t))
                .collect();
        let word_tokens: Vec<usize> = (0..policy.vocab.len())
            .filter(|&v| {
                ![think_open, think_close, answer_open, answer_close, eos, unk].contains(&v)
                    && !answer_tokens.contains(&v)
            })
            .collect();

        let vocab_size = policy.vocab.len();
        let bos = vocab_size;
        let mut set = |feature: usize, token: usize, weight: f64| {
            policy.theta[feature * vocab_size + token] = weight;
        };

        // Sequence skeleton, keyed off the previous token.
        set(bos, think_open, 6.0);
        for &w in &word_tokens {
            set(think_open, w, 2.5);
            for &w2 in &word_tokens {
                set(w, w2, 2.5);
            }
            set(w, think_close, 4.4);
        }
        set(think_close, answer_open, 6.0);
        for &a in &answer_tokens {
            set(answer_open, a, 3.5);
            // An answer token is usually followed by closing the section it
            // appears in; both closers get weight so mentioning the answer
            // inside the think section stays survivable.
            set(a, answer_close, 4.5);
            set(a, think_close, 3.5);
            set(a, period, 2.5);
        }
        set(answer_close, eos, 6.0);

        // Early positions should not close the answer section; this gives the
        // format something to hang on before training sharpens it.
        let bucket0 = vocab_size + 1;
        set(bucket0, answer_close, -2.5);

        // Small symmetry-breaking noise on top of the skeleton.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in policy.theta.iter_mut() {
            *w += rng.gen_range(-0.01..0.01);
        }
        policy
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn n_features(&self) -> usize {
        self.vocab.len() + 1 + N_POSITION_BUCKETS + self.n_classes
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Replace the parameter vector (used by the finite-difference oracle and
    /// checkpoint restore).
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::InvalidInput(format!(
                "parameter vector length {} does not match policy ({})",
                theta.len(),
                self.theta.len()
            )));
        }
        Ok(Self { theta, ..self.clone() })
    }

    /// Re-run construction invariants. Deserialization bypasses `new`, so
    /// checkpoint loading calls this to reject hand-edited or corrupt files.
    pub fn revalidate(&self) -> Result<Self> {
        Self::new(self.vocab.clone(), self.n_classes, self.max_length)?
            .with_theta(self.theta.clone())
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.vocab.iter().position(|t| t == token).map(|i| i as u32)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn eos_id(&self) -> Option<u32> {
        self.token_id(EOS_TOKEN)
    }

    /// Whitespace-split text into token ids; out-of-vocabulary words map to
    /// `<unk>` when present, otherwise they are dropped.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let unk = self.token_id(UNK_TOKEN);
        text.split_whitespace()
            .filter_map(|word| self.token_id(word).or(unk))
            .collect()
    }

    /// Join tokens with single spaces, skipping the end marker.
    pub fn detokenize(&self, tokens: &[u32]) -> String {
        let eos = self.eos_id();
        tokens
            .iter()
            .filter(|&&t| Some(t) != eos)
            .filter_map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The three active feature indices for a generation step.
    fn features(&self, prev: Option<u32>, position: usize, class: usize) -> [usize; 3] {
        let vocab_size = self.vocab.len();
        let prev_feature = prev.map_or(vocab_size, |p| p as usize);
        let bucket = (position / POSITION_BUCKET_WIDTH).min(N_POSITION_BUCKETS - 1);
        [prev_feature, vocab_size + 1 + bucket, vocab_size + 1 + N_POSITION_BUCKETS + class]
    }

    fn logits(&self, features: [usize; 3]) -> Vec<f64> {
        let vocab_size = self.vocab.len();
        (0..vocab_size)
            .map(|v| features.iter().map(|&f| self.theta[f * vocab_size + v]).sum())
            .collect()
    }

    /// Log-probabilities of every next token at temperature 1.
    pub fn next_log_probs(&self, prev: Option<u32>, position: usize, class: usize) -> Vec<f64> {
        log_softmax(&self.logits(self.features(prev, position, class)))
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.n_classes {
            return Err(Error::InvalidInput(format!(
                "prompt class {class} out of range (policy has {})",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Per-token log-probabilities of a response under current parameters.
    pub fn logprob(&self, class: usize, tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_class(class)?;
        let mut out = Vec::with_capacity(tokens.len());
        let mut prev = None;
        for (position, &token) in tokens.iter().enumerate() {
            if token as usize >= self.vocab.len() {
                return Err(Error::InvalidInput(format!(
                    "token id {token} out of vocabulary (size {})",
                    self.vocab.len()
                )));
            }
            out.push(self.next_log_probs(prev, position, class)[token as usize]);
            prev = Some(token);
        }
        Ok(out)
    }

    /// Log-probability gradient of a response with respect to every
    /// parameter, as a dense vector: for the active features of each step,
    /// `d logpi(y_t)/d theta[f][v] = 1[v = y_t] - pi(v)`.
    pub fn logprob_grad(&self, class: usize, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.theta.len()];
        self.accumulate_weighted_logprob_grad(class, tokens, None, &mut grad)?;
        Ok(grad)
    }

    /// Accumulate `sum_t weight_t * d logpi(y_t)/d theta` into `grad`.
    /// `weights: None` means all ones. Both training losses reduce to this
    /// once their per-token coefficients are known.
    pub fn accumulate_weighted_logprob_grad(
        &self,
        class: usize,
        tokens: &[u32],
        weights: Option<&[f64]>,
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_class(class)?;
        if grad.len() != self.theta.len() {
            return Err(Error::InvalidInput(format!(
                "gradient buffer length {} does not match parameter count {}",
                grad.len(),
                self.theta.len()
            )));
        }
        if let Some(w) = weights {
            if w.len() != tokens.len() {
                return Err(Error::InvalidInput(format!(
                    "weight count {} does not match token count {}",
                    w.len(),
                    tokens.len()
                )));
            }
        }
        let vocab_size = self.vocab.len();
        let mut prev = None;
        for (position, &token) in tokens.iter().enumerate() {
            if token as usize >= vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token id {token} out of vocabulary (size {vocab_size})"
                )));
            }
            let weight = weights.map_or(1.0, |w| w[position]);
            let features = self.features(prev, position, class);
            let probs: Vec<f64> =
                log_softmax(&self.logits(features)).iter().map(|lp| lp.exp()).collect();
            for &f in &features {
                let row = &mut grad[f * vocab_size..(f + 1) * vocab_size];
                for (v, p) in probs.iter().enumerate() {
                    row[v] -= weight * p;
                }
                row[token as usize] += weight;
            }
            prev = Some(token);
        }
        Ok(())
    }

    fn sample_one(&self, prompt_id: &str, class: usize, temperature: f64, rng: &mut ChaCha8Rng) -> Rollout {
        let eos = self.eos_id();
        let mut tokens = Vec::new();
        let mut logprobs_old = Vec::new();
        let mut prev = None;
        for position in 0..self.max_length {
            let logits = self.logits(self.features(prev, position, class));
            let tempered: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let probs: Vec<f64> = log_softmax(&tempered).iter().map(|lp| lp.exp()).collect();
            let mut pick = rng.gen::<f64>();
            let mut token = probs.len() - 1;
            for (v, p) in probs.iter().enumerate() {
                if pick < *p {
                    token = v;
                    break;
                }
                pick -= p;
            }
            logprobs_old.push(log_softmax(&logits)[token]);
            tokens.push(token as u32);
            if Some(token as u32) == eos {
                break;
            }
            prev = Some(token as u32);
        }
        Rollout {
            prompt_id: prompt_id.to_string(),
            text: self.detokenize(&tokens),
            tokens,
            logprobs_old,
            reward: RewardBreakdown::new(0.0, 0.0),
        }
    }

    /// Sample a group of responses by ancestral sampling with tempered
    /// logits. Deterministic given the seed; `logprobs_old` are recorded at
    /// temperature 1 regardless of the sampling temperature.
    pub fn sample_rollouts(
        &self,
        prompt_id: &str,
        class: usize,
        group_size: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<Rollout>> {
        self.check_class(class)?;
        if temperature <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "sampling temperature must be positive, got {temperature}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..group_size)
            .map(|_| self.sample_one(prompt_id, class, temperature, &mut rng))
            .collect())
    }

    /// Deterministic argmax decode, used for evaluation metrics.
    pub fn greedy_rollout(&self, prompt_id: &str, class: usize) -> Result<Rollout> {
        self.check_class(class)?;
        let eos = self.eos_id();
        let mut tokens = Vec::new();
        let mut logprobs_old = Vec::new();
        let mut prev = None;
        for position in 0..self.max_length {
            let log_probs = self.next_log_probs(prev, position, class);
            let token = log_probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(v, _)| v)
                .expect("vocabulary is non-empty");
            logprobs_old.push(log_probs[token]);
            tokens.push(token as u32);
            if Some(token as u32) == eos {
                break;
            }
            prev = Some(token as u32);
        }
        Ok(Rollout {
            prompt_id: prompt_id.to_string(),
            text: self.detokenize(&tokens),
            tokens,
            logprobs_old,
            reward: RewardBreakdown::new(0.0, 0.0),
        })
    }

    /// Gradient-descent step: `theta <- theta - learning_rate * gradient`.
    /// Returns the updated snapshot; the caller keeps the old one if needed.
    pub fn apply_update(&self, gradient: &[f64], learning_rate: f64) -> Result<Self> {
        if gradient.len() != self.theta.len() {
            return Err(Error::InvalidInput(format!(
                "gradient length {} does not match parameter count {}",
                gradient.len(),
                self.theta.len()
            )));
        }
        let theta = self
            .theta
            .iter()
            .zip(gradient)
            .map(|(w, g)| w - learning_rate * g)
            .collect();
        Ok(Self { theta, ..self.clone() })
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_sum).collect()
}

/// Central-difference gradient of `loss_fn` at the policy's current
/// parameters: `(L(theta + h e_k) - L(theta - h e_k)) / 2h` per coordinate.
/// The independent check for every analytic gradient in this crate.
pub fn finite_difference_gradient<F>(policy: &ToyPolicy, h: f64, loss_fn: F) -> Vec<f64>
where
    F: Fn(&ToyPolicy) -> f64,
{
    assert!(h > 0.0, "step size must be positive");
    let base = policy.theta().to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        let mut plus = base.clone();
        plus[k] += h;
        let mut minus = base.clone();
        minus[k] -= h;
        let loss_plus = loss_fn(&policy.with_theta(plus).expect("same length"));
        let loss_minus = loss_fn(&policy.with_theta(minus).expect("same length"));
        grad.push((loss_plus - loss_minus) / (2.0 * h));
    }
    grad
}

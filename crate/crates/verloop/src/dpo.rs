//! Direct preference optimization: the pairwise logistic loss over sequence
//! log-probabilities against a frozen reference policy, and its analytic
//! gradient through the toy policy.
//!
//! Sequence log-probability is the raw sum over response tokens, with no
//! length normalization; length preferences in the pair data are part of the
//! training signal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::ToyPolicy;

/// The four sequence log-probabilities entering one preference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceLogProbs {
    pub chosen_policy: f64,
    pub chosen_ref: f64,
    pub rejected_policy: f64,
    pub rejected_ref: f64,
}

impl PreferenceLogProbs {
    /// `beta * [(chosen_policy - chosen_ref) - (rejected_policy - rejected_ref)]`,
    /// the argument of the logistic.
    pub fn margin(&self, beta: f64) -> f64 {
        beta * ((self.chosen_policy - self.chosen_ref)
            - (self.rejected_policy - self.rejected_ref))
    }

    fn validate(&self) -> Result<()> {
        let values = [self.chosen_policy, self.chosen_ref, self.rejected_policy, self.rejected_ref];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite preference log-probs {self:?}")));
        }
        Ok(())
    }
}

/// `log(1 + exp(x))` without overflow for any argument magnitude.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, evaluated on the non-overflowing side.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One pair's loss: `-log sigmoid(margin)`, stable for |margin| up to 1e4
/// and beyond.
pub fn dpo_loss(lp: &PreferenceLogProbs, beta: f64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    lp.validate()?;
    Ok(softplus(-lp.margin(beta)))
}

/// Mean loss over a non-empty batch.
pub fn dpo_batch_loss(pairs: &[PreferenceLogProbs], beta: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty preference batch".into()));
    }
    let mut total = 0.0;
    for lp in pairs {
        total += dpo_loss(lp, beta)?;
    }
    Ok(total / pairs.len() as f64)
}

/// A preference pair in token form, ready for loss evaluation. Both
/// sequences condition on the same prompt class.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPair {
    pub class: usize,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

fn sequence_logprob(policy: &ToyPolicy, class: usize, tokens: &[u32]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty response in preference pair".into()));
    }
    Ok(policy.logprob(class, tokens)?.iter().sum())
}

/// Batch loss where the policy side is evaluated under `policy` and the
/// reference side under `reference`. This is the function the
/// finite-difference oracle probes (with `reference` held fixed).
pub fn dpo_batch_loss_value(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TokenizedPair],
    beta: f64,
) -> Result<f64> {
    let lps = pairs
        .iter()
        .map(|pair| {
            Ok(PreferenceLogProbs {
                chosen_policy: sequence_logprob(policy, pair.class, &pair.chosen)?,
                chosen_ref: sequence_logprob(reference, pair.class, &pair.chosen)?,
                rejected_policy: sequence_logprob(policy, pair.class, &pair.rejected)?,
                rejected_ref: sequence_logprob(reference, pair.class, &pair.rejected)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    dpo_batch_loss(&lps, beta)
}

/// Batch loss and its analytic gradient with respect to `policy` parameters.
///
/// Per pair, `d loss/d margin = -sigmoid(-margin)` and the margin moves with
/// `beta * (grad logp(chosen) - grad logp(rejected))`; the reference terms
/// are constants.
pub fn dpo_batch_loss_and_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TokenizedPair],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty preference batch".into()));
    }
    if beta <= 0.0 {
        return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    let mut grad = vec![0.0; policy.theta().len()];
    let mut total_loss = 0.0;
    let batch_scale = 1.0 / pairs.len() as f64;
    for pair in pairs {
        let lp = PreferenceLogProbs {
            chosen_policy: sequence_logprob(policy, pair.class, &pair.chosen)?,
            chosen_ref: sequence_logprob(reference, pair.class, &pair.chosen)?,
            rejected_policy: sequence_logprob(policy, pair.class, &pair.rejected)?,
            rejected_ref: sequence_logprob(reference, pair.class, &pair.rejected)?,
        };
        total_loss += dpo_loss(&lp, beta)?;
        let coefficient = batch_scale * -sigmoid(-lp.margin(beta)) * beta;
        let chosen_weights = vec![coefficient; pair.chosen.len()];
        policy.accumulate_weighted_logprob_grad(
            pair.class,
            &pair.chosen,
            Some(&chosen_weights),
            &mut grad,
        )?;
        let rejected_weights = vec![-coefficient; pair.rejected.len()];
        policy.accumulate_weighted_logprob_grad(
            pair.class,
            &pair.rejected,
            Some(&rejected_weights),
            &mut grad,
        )?;
    }
    Ok((total_loss * batch_scale, grad))
}

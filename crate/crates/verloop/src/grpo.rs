//! Group-relative policy optimization: advantage normalization within a
//! group of rollouts, the clipped token-level surrogate, an optional KL
//! penalty (off by default), and the zero-advantage batch filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Rollout, ToyPolicy};

/// Below this reward standard deviation a group counts as zero-variance:
/// advantages are all zero and the filter drops it from gradient batches.
pub const SIGMA_TOLERANCE: f64 = 1e-8;

/// A prompt's G rollouts with their training rewards and normalized
/// advantages. `avg_accuracy` averages the accuracy component only (the
/// quantity that drives Simple/Hard categorization), while `rewards` and
/// `advantages` are built from total reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub avg_accuracy: f64,
}

impl RolloutGroup {
    /// Build a group from scored rollouts (rewards must be filled in).
    pub fn from_rollouts(prompt_id: impl Into<String>, rollouts: Vec<Rollout>) -> Result<Self> {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward.total).collect();
        let advantages = group_advantages(&rewards)?;
        let avg_accuracy =
            rollouts.iter().map(|r| r.reward.accuracy).sum::<f64>() / rollouts.len() as f64;
        Ok(Self { prompt_id: prompt_id.into(), rollouts, rewards, advantages, avg_accuracy })
    }

    pub fn group_size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn has_nonzero_advantage(&self) -> bool {
        self.advantages.iter().any(|a| *a != 0.0)
    }
}

/// Per-rollout, per-token probability ratios between the current and the
/// rollout-time policy. Construction rejects non-positive, non-finite, and
/// empty rows, so downstream math can assume a valid table.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRatioTable(Vec<Vec<f64>>);

impl TokenRatioTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::InvalidInput(format!("rollout {i} has an empty ratio row")));
            }
            if let Some(bad) = row.iter().find(|r| !r.is_finite() || **r <= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "rollout {i} has invalid probability ratio {bad}"
                )));
            }
        }
        Ok(Self(rows))
    }

    /// Ratios `exp(logprob_current - logprob_old)` from aligned per-token
    /// log-probability lists.
    pub fn from_logprobs(current: &[Vec<f64>], old: &[Vec<f64>]) -> Result<Self> {
        if current.len() != old.len() {
            return Err(Error::InvalidInput(format!(
                "logprob row counts differ: {} vs {}",
                current.len(),
                old.len()
            )));
        }
        let rows = current
            .iter()
            .zip(old)
            .enumerate()
            .map(|(i, (cur, prev))| {
                if cur.len() != prev.len() {
                    return Err(Error::InvalidInput(format!(
                        "rollout {i} logprob lengths differ: {} vs {}",
                        cur.len(),
                        prev.len()
                    )));
                }
                Ok(cur.iter().zip(prev).map(|(c, p)| (c - p).exp()).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Self::new(rows)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.0
    }
}

/// Normalize rewards within a group: `(r_i - mean) / population_std`.
/// Degenerate groups (std below [`SIGMA_TOLERANCE`]) get all-zero advantages
/// instead of a division blow-up.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidGroup(format!(
            "advantage normalization needs at least 2 rollouts, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let variance = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let sigma = variance.sqrt();
    if sigma < SIGMA_TOLERANCE {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / sigma).collect())
}

/// The clipped surrogate objective (to be maximized):
/// `(1/G) sum_i (1/|y_i|) sum_t min(ratio * adv_i, clip(ratio, 1-eps, 1+eps) * adv_i)`.
/// Every token of rollout i carries the same advantage (outcome supervision).
pub fn clipped_surrogate(
    ratios: &TokenRatioTable,
    advantages: &[f64],
    epsilon: f64,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let rows = ratios.rows();
    if rows.len() != advantages.len() {
        return Err(Error::InvalidInput(format!(
            "{} ratio rows vs {} advantages",
            rows.len(),
            advantages.len()
        )));
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("surrogate over an empty group".into()));
    }
    let total: f64 = rows
        .iter()
        .zip(advantages)
        .map(|(row, &adv)| {
            let per_token: f64 = row
                .iter()
                .map(|&r| (r * adv).min(r.clamp(1.0 - epsilon, 1.0 + epsilon) * adv))
                .sum();
            per_token / row.len() as f64
        })
        .sum();
    Ok(total / rows.len() as f64)
}

/// Non-negative KL estimate `k(r) = 1/r + ln(r) - 1`, averaged per token and
/// then per rollout, mirroring the surrogate's weighting. The training
/// default disables it (coefficient 0); it exists for completeness.
pub fn kl_penalty(ratios: &TokenRatioTable) -> f64 {
    let rows = ratios.rows();
    if rows.is_empty() {
        return 0.0;
    }
    let total: f64 = rows
        .iter()
        .map(|row| row.iter().map(|&r| 1.0 / r + r.ln() - 1.0).sum::<f64>() / row.len() as f64)
        .sum();
    total / rows.len() as f64
}

/// Training loss: `-(surrogate - beta_kl * kl_penalty)`.
pub fn grpo_loss(
    group: &RolloutGroup,
    ratios: &TokenRatioTable,
    epsilon: f64,
    beta_kl: f64,
) -> Result<f64> {
    let surrogate = clipped_surrogate(ratios, &group.advantages, epsilon)?;
    let kl = if beta_kl != 0.0 { kl_penalty(ratios) } else { 0.0 };
    Ok(-(surrogate - beta_kl * kl))
}

/// Drop groups whose advantages are all zero (uniform reward: all-correct or
/// all-equally-wrong); they contribute no gradient. Order-preserving and
/// idempotent.
pub fn zero_advantage_filter(groups: Vec<RolloutGroup>) -> Vec<RolloutGroup> {
    groups.into_iter().filter(RolloutGroup::has_nonzero_advantage).collect()
}

/// Loss for a group under `policy`, with ratios taken against the rollouts'
/// recorded `logprobs_old`. This is the function the finite-difference
/// oracle probes.
pub fn grpo_loss_value(
    policy: &ToyPolicy,
    class: usize,
    group: &RolloutGroup,
    epsilon: f64,
    beta_kl: f64,
) -> Result<f64> {
    let current: Vec<Vec<f64>> = group
        .rollouts
        .iter()
        .map(|r| policy.logprob(class, &r.tokens))
        .collect::<Result<_>>()?;
    let old: Vec<Vec<f64>> = group.rollouts.iter().map(|r| r.logprobs_old.clone()).collect();
    let ratios = TokenRatioTable::from_logprobs(&current, &old)?;
    grpo_loss(group, &ratios, epsilon, beta_kl)
}

/// Loss and its analytic gradient with respect to the policy parameters.
///
/// Per token, with `r = exp(lp - lp_old)` and advantage `A`:
/// the surrogate term contributes `A * r` to `d(surrogate)/d(lp)` while the
/// ratio stays on the unclipped branch (`r*A <= clip(r)*A`), 0 once clipped;
/// the KL term contributes `1 - 1/r`. Both scale by `1/(G * |y_i|)`, and
/// `d(lp)/d(theta)` comes from the policy's log-probability gradient.
pub fn grpo_loss_and_grad(
    policy: &ToyPolicy,
    class: usize,
    group: &RolloutGroup,
    epsilon: f64,
    beta_kl: f64,
) -> Result<(f64, Vec<f64>)> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let current: Vec<Vec<f64>> = group
        .rollouts
        .iter()
        .map(|r| policy.logprob(class, &r.tokens))
        .collect::<Result<_>>()?;
    let old: Vec<Vec<f64>> = group.rollouts.iter().map(|r| r.logprobs_old.clone()).collect();
    let ratios = TokenRatioTable::from_logprobs(&current, &old)?;
    let loss = grpo_loss(group, &ratios, epsilon, beta_kl)?;

    let group_size = group.rollouts.len() as f64;
    let mut grad = vec![0.0; policy.theta().len()];
    for (i, rollout) in group.rollouts.iter().enumerate() {
        let adv = group.advantages[i];
        let row = &ratios.rows()[i];
        let scale = 1.0 / (group_size * row.len() as f64);
        let weights: Vec<f64> = row
            .iter()
            .map(|&r| {
                let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon);
                let surrogate_slope = if r * adv <= clipped * adv { adv * r } else { 0.0 };
                let kl_slope = if beta_kl != 0.0 { beta_kl * (1.0 - 1.0 / r) } else { 0.0 };
                scale * (-surrogate_slope + kl_slope)
            })
            .collect();
        policy.accumulate_weighted_logprob_grad(class, &rollout.tokens, Some(&weights), &mut grad)?;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::finite_difference_gradient;
    use crate::rewards::RewardBreakdown;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(rows: Vec<Vec<f64>>) -> TokenRatioTable {
        TokenRatioTable::new(rows).unwrap()
    }

    // ------------------------------------------------------------------
    // group_advantages
    // ------------------------------------------------------------------

    #[test]
    fn advantages_match_hand_arithmetic() {
        let rewards = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let expected = [1.7321, -0.5774, -0.5774, 1.7321, -0.5774, -0.5774, -0.5774, -0.5774];
        let got = group_advantages(&rewards).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() <= 1e-4, "{g} vs {e}");
        }
    }

    #[test]
    fn zero_variance_group_gets_zero_advantages() {
        assert_eq!(group_advantages(&[0.7; 4]).unwrap(), vec![0.0; 4]);
        // Differences below the sigma tolerance also count as degenerate.
        assert_eq!(group_advantages(&[0.7, 0.7 + 1e-12, 0.7]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn undersized_group_is_rejected() {
        assert!(group_advantages(&[1.0]).is_err());
        assert!(group_advantages(&[]).is_err());
    }

    proptest! {
        // Output mean 0 and population std 1, checked by an independent
        // two-pass statistic over the output vector.
        #[test]
        fn advantages_are_standardized(
            rewards in proptest::collection::vec(0.0..1.5f64, 2..=16)
        ) {
            let adv = group_advantages(&rewards).unwrap();
            let n = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / n;
            let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            if adv.iter().any(|a| *a != 0.0) {
                prop_assert!(mean.abs() <= 1e-9, "mean {mean}");
                prop_assert!((var.sqrt() - 1.0).abs() <= 1e-6, "std {}", var.sqrt());
            } else {
                // Degenerate branch: inputs were (near-)constant.
                let rmean = rewards.iter().sum::<f64>() / n;
                let rvar = rewards.iter().map(|r| (r - rmean) * (r - rmean)).sum::<f64>() / n;
                prop_assert!(rvar.sqrt() < SIGMA_TOLERANCE);
            }
        }

        #[test]
        fn advantages_are_permutation_equivariant(
            rewards in proptest::collection::vec(0.0..1.5f64, 3..=8),
            rotation in 0usize..8,
        ) {
            let rot = rotation % rewards.len();
            let mut rotated = rewards.clone();
            rotated.rotate_left(rot);
            let mut expected = group_advantages(&rewards).unwrap();
            expected.rotate_left(rot);
            let got = group_advantages(&rotated).unwrap();
            for (g, e) in got.iter().zip(&expected) {
                prop_assert!((g - e).abs() <= 1e-12);
            }
        }
    }

    // ------------------------------------------------------------------
    // clipped_surrogate / kl_penalty
    // ------------------------------------------------------------------

    #[test]
    fn surrogate_matches_scalar_hand_values() {
        let eps = 0.2;
        assert!((clipped_surrogate(&table(vec![vec![1.0]]), &[0.5], eps).unwrap() - 0.5).abs() < 1e-12);
        // Ratio above the clip ceiling with positive advantage: 1.2 * 1.0.
        assert!((clipped_surrogate(&table(vec![vec![1.5]]), &[1.0], eps).unwrap() - 1.2).abs() < 1e-12);
        // Ratio below the floor with negative advantage: clip binds from below.
        assert!((clipped_surrogate(&table(vec![vec![0.5]]), &[-1.0], eps).unwrap() + 0.8).abs() < 1e-12);
    }

    #[test]
    fn surrogate_averages_per_token_then_per_rollout() {
        // Two rollouts of different lengths; hand value:
        // rollout 0: mean(1*2, 1.1*2) = 2.1; rollout 1: 0.9 * -1 = -0.9
        // surrogate = (2.1 - 0.9) / 2 = 0.6.
        let t = table(vec![vec![1.0, 1.1], vec![0.9]]);
        let got = clipped_surrogate(&t, &[2.0, -1.0], 0.2).unwrap();
        assert!((got - 0.6).abs() < 1e-12, "{got}");
    }

    #[test]
    fn surrogate_input_validation() {
        assert!(TokenRatioTable::new(vec![vec![]]).is_err());
        assert!(TokenRatioTable::new(vec![vec![0.0]]).is_err());
        assert!(TokenRatioTable::new(vec![vec![-1.0]]).is_err());
        assert!(TokenRatioTable::new(vec![vec![f64::INFINITY]]).is_err());
        let t = table(vec![vec![1.0]]);
        assert!(clipped_surrogate(&t, &[1.0, 2.0], 0.2).is_err(), "row/advantage mismatch");
        assert!(clipped_surrogate(&t, &[1.0], 0.0).is_err(), "epsilon must be positive");
    }

    #[test]
    fn kl_penalty_scalar_values() {
        assert_eq!(kl_penalty(&table(vec![vec![1.0, 1.0], vec![1.0]])), 0.0);
        let e = std::f64::consts::E;
        let got = kl_penalty(&table(vec![vec![e]]));
        assert!((got - 1.0 / e).abs() < 1e-12, "{got}");
    }

    proptest! {
        // With every ratio at 1 the surrogate is the mean advantage, for any
        // epsilon.
        #[test]
        fn unit_ratios_give_mean_advantage(
            advantages in proptest::collection::vec(-2.0..2.0f64, 1..6),
            lens in proptest::collection::vec(1usize..5, 1..6),
            eps in 0.01..0.9f64,
        ) {
            let n = advantages.len();
            let rows: Vec<Vec<f64>> = lens.iter().cycle().take(n).map(|&l| vec![1.0; l]).collect();
            let got = clipped_surrogate(&table(rows), &advantages, eps).unwrap();
            let mean = advantages.iter().sum::<f64>() / n as f64;
            prop_assert!((got - mean).abs() <= 1e-12);
        }

        // Raising a single ratio never lowers the surrogate when its
        // advantage is positive, and the token's contribution is capped at
        // (1+eps) * advantage.
        #[test]
        fn surrogate_monotone_and_capped_for_positive_advantage(
            r1 in 0.05..3.0f64,
            r2 in 0.05..3.0f64,
            adv in 0.01..2.0f64,
            eps in 0.05..0.5f64,
        ) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let s_lo = clipped_surrogate(&table(vec![vec![lo]]), &[adv], eps).unwrap();
            let s_hi = clipped_surrogate(&table(vec![vec![hi]]), &[adv], eps).unwrap();
            prop_assert!(s_lo <= s_hi + 1e-12);
            prop_assert!(s_hi <= (1.0 + eps) * adv + 1e-12);
        }

        #[test]
        fn kl_penalty_is_non_negative(
            ratios in proptest::collection::vec(0.05..5.0f64, 1..8)
        ) {
            prop_assert!(kl_penalty(&table(vec![ratios])) >= 0.0);
        }
    }

    // ------------------------------------------------------------------
    // grpo_loss / filter
    // ------------------------------------------------------------------

    fn make_group(rewards: &[f64]) -> RolloutGroup {
        let rollouts = rewards
            .iter()
            .enumerate()
            .map(|(i, &total)| Rollout {
                prompt_id: "p".into(),
                text: String::new(),
                tokens: vec![i as u32],
                logprobs_old: vec![-1.0],
                reward: RewardBreakdown::new(total, 0.0),
            })
            .collect();
        RolloutGroup::from_rollouts("p", rollouts).unwrap()
    }

    #[test]
    fn loss_is_negated_surrogate_when_kl_disabled() {
        let group = make_group(&[1.0, 0.0]);
        // advantages are [1, -1]; ratios chosen so the hand value is easy:
        // surrogate = (min(1.5, 1.2)*1 + max? ...) -> rollout0: 1.2, rollout1: 1*-1 = -1
        let t = table(vec![vec![1.5], vec![1.0]]);
        let loss = grpo_loss(&group, &t, 0.2, 0.0).unwrap();
        assert!((loss - -(1.2 - 1.0) / 2.0).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn zero_advantages_leave_only_the_kl_term() {
        let group = make_group(&[0.7, 0.7]);
        assert!(!group.has_nonzero_advantage());
        let e = std::f64::consts::E;
        let t = table(vec![vec![e], vec![1.0]]);
        let beta = 0.3;
        let loss = grpo_loss(&group, &t, 0.2, beta).unwrap();
        assert!((loss - beta * kl_penalty(&t)).abs() < 1e-12);
    }

    #[test]
    fn filter_drops_exactly_the_zero_advantage_groups() {
        let uniform_high = make_group(&[1.5, 1.5, 1.5, 1.5]);
        let mixed = make_group(&[1.5, 0.0, 0.0, 0.0]);
        let uniform_zero = make_group(&[0.0, 0.0]);
        let groups = vec![uniform_high.clone(), mixed.clone(), uniform_zero];
        let kept = zero_advantage_filter(groups);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].prompt_id, mixed.prompt_id);
        assert_eq!(kept[0].rewards, mixed.rewards);
        // Idempotence.
        assert_eq!(zero_advantage_filter(kept.clone()), kept);
        assert!(zero_advantage_filter(vec![]).is_empty());
    }

    #[test]
    fn group_accuracy_averages_accuracy_component_only() {
        // Totals include format reward; avg_accuracy must not.
        let rollouts = vec![
            Rollout {
                prompt_id: "p".into(),
                text: String::new(),
                tokens: vec![0],
                logprobs_old: vec![-1.0],
                reward: RewardBreakdown::new(1.0, 0.5),
            },
            Rollout {
                prompt_id: "p".into(),
                text: String::new(),
                tokens: vec![1],
                logprobs_old: vec![-1.0],
                reward: RewardBreakdown::new(0.0, 0.5),
            },
        ];
        let group = RolloutGroup::from_rollouts("p", rollouts).unwrap();
        assert_eq!(group.avg_accuracy, 0.5);
        assert_eq!(group.rewards, vec![1.5, 0.5]);
    }

    // ------------------------------------------------------------------
    // Analytic gradient vs finite differences
    // ------------------------------------------------------------------

    fn fd_check_case(seed: u64, beta_kl: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab: Vec<String> =
            ["a", "b", "c", "d", "<eos>"].iter().map(|s| s.to_string()).collect();
        let base = ToyPolicy::new(vocab, 3, 6).unwrap();
        let theta: Vec<f64> = (0..base.theta().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sampler = base.with_theta(theta).unwrap();
        let class = rng.gen_range(0..3);
        let mut rollouts =
            sampler.sample_rollouts("p", class, 4, 1.0, rng.gen()).unwrap();
        for r in &mut rollouts {
            r.reward = RewardBreakdown::new(rng.gen_range(0.0..1.0), 0.0);
        }
        let group = RolloutGroup::from_rollouts("p", rollouts).unwrap();
        // Evaluate at parameters different from the sampling snapshot so
        // ratios stray from 1 and both clip branches can appear.
        let drift: Vec<f64> = sampler.theta().iter().map(|w| w + rng.gen_range(-0.1..0.1)).collect();
        let policy = sampler.with_theta(drift).unwrap();

        let (loss, analytic) = grpo_loss_and_grad(&policy, class, &group, 0.2, beta_kl).unwrap();
        let direct = grpo_loss_value(&policy, class, &group, 0.2, beta_kl).unwrap();
        assert_eq!(loss, direct);
        let fd = finite_difference_gradient(&policy, 1e-5, |p| {
            grpo_loss_value(p, class, &group, 0.2, beta_kl).unwrap()
        });
        let diff: f64 =
            analytic.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale_a: f64 = analytic.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale_f: f64 = fd.iter().map(|g| g * g).sum::<f64>().sqrt();
        // The 1e-6 floor covers genuinely-zero gradients (e.g. identical
        // rollouts whose advantages cancel), where finite differences return
        // pure cancellation noise and a relative test would divide by it.
        assert!(
            diff <= 1e-4 * scale_a.max(scale_f).max(1e-6),
            "seed {seed}: relative gradient error {}",
            diff / scale_f.max(1e-12)
        );
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in [1, 2, 3] {
            fd_check_case(seed, 0.0);
        }
        // With the KL term switched on.
        for seed in [4, 5] {
            fd_check_case(seed, 0.25);
        }
    }
}

//! The iteration loop: group-relative rollouts, rollout-aware verification,
//! preference refinement, mastered-prompt pruning, and metrics.
//!
//! Iteration 0 trains on the activation split; later iterations train on
//! whatever remains of the training split after pruning. Every stage ends
//! with an atomic checkpoint, and all sampling streams derive from the run
//! seed plus stable labels, so a resumed run retraces an uninterrupted one
//! bit for bit.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::build_backends;
use crate::config::{IterationConfig, PolicyConfig, PolicyInit};
use crate::error::{Error, Result};
use crate::extraction;
use crate::grpo::{self, RolloutGroup};
use crate::pairs::{self, OracleProvider, PreferencePair};
use crate::policy::{ToyPolicy, N_STANDARD_CLASSES, STANDARD_MAX_LENGTH};
use crate::seeding::derive_seed;
use crate::store::{self, RolloutRecord};
use crate::task::{self, Prompt};
use crate::verifier::{Consistency, JudgeBackend, VerifierConfig, VerifierReport};
use crate::{dpo, rewards};

/// Samples drawn per eval prompt when probing mean response length around a
/// preference-refinement stage. Sized so the probe's sampling error is well
/// below the length shift a refinement stage produces; sampling is cheap
/// relative to a training epoch.
const LENGTH_PROBE_SAMPLES: usize = 256;

/// A pipeline stage, in execution order within an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Grpo,
    Verify,
    Dpo,
}

impl Stage {
    fn label(self) -> &'static str {
        match self {
            Stage::Grpo => "grpo",
            Stage::Verify => "verify",
            Stage::Dpo => "dpo",
        }
    }

    fn ordinal(self) -> usize {
        match self {
            Stage::Grpo => 0,
            Stage::Verify => 1,
            Stage::Dpo => 2,
        }
    }
}

/// Greedy-decoding evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    /// Mean accuracy reward.
    pub accuracy: f64,
    /// Mean accuracy reward counted only where the reasoning is consistent
    /// with the answer; never exceeds `accuracy`.
    pub acc_true: f64,
    /// Mean whitespace-token count of think plus answer sections.
    pub mean_length_tokens: f64,
    /// Fraction of responses whose reasoning contradicts their answer
    /// (consistency neither Consistent nor Unknown).
    pub inconsistency_rate: f64,
    /// Responses flagged for sentence repetition.
    pub repetition_count: usize,
}

/// Mean sampled response length immediately before and after one
/// preference-refinement stage, same sampling seed on both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthProbe {
    pub iteration: usize,
    pub mean_length_before: f64,
    pub mean_length_after: f64,
}

/// Everything the loop needs to continue besides the policy itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    /// Iteration the most recent completed stage belongs to.
    pub iteration: usize,
    /// Most recent completed stage, `None` before any stage finished.
    pub stage: Option<Stage>,
    /// Training-split prompt ids still in rotation.
    pub active_ids: Vec<String>,
    /// Prompt ids whose latest group had average accuracy 1.
    pub mastered_ids: BTreeSet<String>,
    /// Baseline snapshot plus one snapshot per completed iteration.
    pub metrics_history: Vec<MetricsSnapshot>,
    pub length_probes: Vec<LengthProbe>,
}

impl LoopState {
    /// Total stages completed since the run began.
    fn completed_rank(&self) -> usize {
        match self.stage {
            None => 0,
            Some(stage) => self.iteration * 3 + stage.ordinal() + 1,
        }
    }
}

/// What a checkpoint stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPayload {
    pub policy: ToyPolicy,
    pub state: LoopState,
}

/// Final policy and bookkeeping of a loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub policy: ToyPolicy,
    pub state: LoopState,
}

/// Construct the starting policy declared in config.
pub fn init_policy(config: &PolicyConfig) -> Result<ToyPolicy> {
    Ok(match config.init {
        PolicyInit::Templated => ToyPolicy::templated(config.init_seed),
        PolicyInit::Uniform => {
            ToyPolicy::new(ToyPolicy::standard_vocab(), N_STANDARD_CLASSES, STANDARD_MAX_LENGTH)?
        }
    })
}

/// Whitespace-token count of the think and answer sections combined.
fn response_length_tokens(text: &str) -> usize {
    let parsed = extraction::extract_sections(text);
    let think = parsed.think.as_deref().map_or(0, |t| t.split_whitespace().count());
    let answer = parsed.answer_raw.as_deref().map_or(0, |a| a.split_whitespace().count());
    think + answer
}

fn class_map(prompts: &[Prompt]) -> Result<HashMap<&str, usize>> {
    prompts.iter().map(|p| Ok((p.id.as_str(), p.class()?))).collect()
}

fn rollout_store_path(config: &IterationConfig, iteration: usize) -> PathBuf {
    config.paths.rollout_dir.join(format!("iter{iteration}.jsonl"))
}

fn pair_store_path(config: &IterationConfig, iteration: usize) -> PathBuf {
    config.paths.pair_dir.join(format!("iter{iteration}.jsonl"))
}

fn checkpoint_path(config: &IterationConfig, iteration: usize, stage: Stage) -> PathBuf {
    config.paths.checkpoint_dir.join(format!("iter{iteration}_{}.json", stage.label()))
}

/// Path of the convenience copy updated at every checkpoint.
pub fn latest_checkpoint_path(config: &IterationConfig) -> PathBuf {
    config.paths.checkpoint_dir.join("latest.json")
}

/// One group-relative training stage: per epoch, sample a scored group per
/// prompt, drop zero-advantage groups, and take clipped-surrogate gradient
/// steps over batches of the surviving groups. All sampled rollouts are
/// persisted (the verifier needs the filtered ones too); the returned groups
/// are the final epoch's, which the verifier stage consumes.
pub fn run_grpo_stage(
    policy: &ToyPolicy,
    prompts: &[Prompt],
    config: &IterationConfig,
    iteration: usize,
    store_path: &Path,
) -> Result<(ToyPolicy, Vec<RolloutGroup>)> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("rollout stage needs a non-empty dataset".into()));
    }
    let grpo_cfg = &config.grpo;
    let learning_rate = if iteration == 0 {
        grpo_cfg.learning_rate
    } else {
        grpo_cfg.continue_learning_rate
    };
    let groups_per_step = (grpo_cfg.global_batch / grpo_cfg.group_size).max(1);
    let classes = class_map(prompts)?;

    let mut current = policy.clone();
    let mut records = Vec::new();
    let mut final_groups = Vec::new();

    for epoch in 0..grpo_cfg.epochs {
        for chunk in prompts.chunks(grpo_cfg.rollout_batch) {
            let snapshot = &current;
            let groups = chunk
                .par_iter()
                .map(|prompt| {
                    let seed = derive_seed(
                        config.run.seed,
                        &["rollout", &iteration.to_string(), &epoch.to_string(), &prompt.id],
                    );
                    task::rollout_group(
                        snapshot,
                        prompt,
                        grpo_cfg.group_size,
                        grpo_cfg.temperature,
                        seed,
                    )
                })
                .collect::<Result<Vec<RolloutGroup>>>()?;

            for group in &groups {
                for (index, rollout) in group.rollouts.iter().enumerate() {
                    records.push(RolloutRecord::from_rollout(
                        iteration,
                        epoch * grpo_cfg.group_size + index,
                        rollout,
                    ));
                }
            }
            if epoch + 1 == grpo_cfg.epochs {
                final_groups.extend(groups.iter().cloned());
            }

            let active = grpo::zero_advantage_filter(groups);
            if active.is_empty() {
                log::info!(
                    "iteration {iteration} epoch {epoch}: every group has uniform reward, skipping update"
                );
                continue;
            }
            for step_groups in active.chunks(groups_per_step) {
                let mut gradient = vec![0.0; current.theta().len()];
                let scale = 1.0 / step_groups.len() as f64;
                for group in step_groups {
                    let class = classes[group.prompt_id.as_str()];
                    let (_, group_grad) = grpo::grpo_loss_and_grad(
                        &current,
                        class,
                        group,
                        grpo_cfg.epsilon,
                        grpo_cfg.beta_kl,
                    )?;
                    for (g, d) in gradient.iter_mut().zip(&group_grad) {
                        *g += scale * d;
                    }
                }
                current = current.apply_update(&gradient, learning_rate)?;
            }
        }
    }
    store::write_jsonl(store_path, &records)?;
    Ok((current, final_groups))
}

/// Sample and score one group per prompt without touching parameters,
/// persisting the store in the same layout the training stage writes.
pub fn sample_rollout_store(
    policy: &ToyPolicy,
    prompts: &[Prompt],
    config: &IterationConfig,
    iteration: usize,
    store_path: &Path,
) -> Result<Vec<RolloutGroup>> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("rollout sampling needs a non-empty dataset".into()));
    }
    let groups = prompts
        .par_iter()
        .map(|prompt| {
            let seed = derive_seed(
                config.run.seed,
                &["rollout", &iteration.to_string(), "0", &prompt.id],
            );
            task::rollout_group(
                policy,
                prompt,
                config.grpo.group_size,
                config.grpo.temperature,
                seed,
            )
        })
        .collect::<Result<Vec<RolloutGroup>>>()?;
    let mut records = Vec::new();
    for group in &groups {
        for (index, rollout) in group.rollouts.iter().enumerate() {
            records.push(RolloutRecord::from_rollout(iteration, index, rollout));
        }
    }
    store::write_jsonl(store_path, &records)?;
    Ok(groups)
}

/// Rebuild the final epoch's groups from a persisted rollout store.
pub fn load_final_epoch_groups(store_path: &Path, group_size: usize) -> Result<Vec<RolloutGroup>> {
    let records: Vec<RolloutRecord> = store::read_jsonl(store_path)?;
    let mut order: Vec<String> = Vec::new();
    let mut by_prompt: HashMap<String, Vec<RolloutRecord>> = HashMap::new();
    for record in records {
        let entry = by_prompt.entry(record.prompt_id.clone()).or_insert_with(|| {
            order.push(record.prompt_id.clone());
            Vec::new()
        });
        entry.push(record);
    }
    order
        .into_iter()
        .map(|prompt_id| {
            let mut rollouts = by_prompt.remove(&prompt_id).expect("ordered ids");
            if !rollouts.len().is_multiple_of(group_size) {
                return Err(Error::Data(format!(
                    "store has {} rollouts for {prompt_id}, not a multiple of group size {group_size}",
                    rollouts.len()
                )));
            }
            rollouts.sort_by_key(|r| r.rollout_index);
            let last_group = rollouts.split_off(rollouts.len() - group_size);
            RolloutGroup::from_rollouts(
                prompt_id,
                last_group.into_iter().map(RolloutRecord::into_rollout).collect(),
            )
        })
        .collect()
}

/// Verify every rollout of every group, persist the assembled preference
/// dataset, and report which prompts were solved across the whole group.
pub fn run_verifier_stage(
    groups: &[RolloutGroup],
    prompts: &[Prompt],
    config: &IterationConfig,
    judge: &dyn JudgeBackend,
    oracle: &dyn OracleProvider,
    iteration: usize,
    pair_path: &Path,
) -> Result<(Vec<PreferencePair>, BTreeSet<String>)> {
    let by_id: HashMap<&str, &Prompt> = prompts.iter().map(|p| (p.id.as_str(), p)).collect();
    let reports = groups
        .par_iter()
        .map(|group| {
            let prompt = by_id.get(group.prompt_id.as_str()).copied().ok_or_else(|| {
                Error::Data(format!("rollout group references unknown prompt {}", group.prompt_id))
            })?;
            group
                .rollouts
                .iter()
                .map(|rollout| {
                    crate::verifier::verify_rollout(
                        &rollout.text,
                        &prompt.question,
                        &prompt.ground_truth,
                        prompt.qtype,
                        judge,
                        &config.verifier,
                    )
                })
                .collect::<Result<Vec<VerifierReport>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mastered: BTreeSet<String> = groups
        .iter()
        .filter(|g| g.avg_accuracy == 1.0)
        .map(|g| g.prompt_id.clone())
        .collect();

    let pairs = pairs::assemble_dataset(
        prompts,
        groups,
        &reports,
        &config.pairs,
        &config.verifier,
        judge,
        oracle,
        derive_seed(config.run.seed, &["pairs", &iteration.to_string()]),
    )?;
    store::write_jsonl(pair_path, &pairs)?;
    Ok((pairs, mastered))
}

/// Preference-refinement stage: minibatch descent on the pairwise loss with
/// the stage-entry policy frozen as the reference. Empty pair sets are a
/// logged no-op.
pub fn run_dpo_stage(
    policy: &ToyPolicy,
    pairs: &[PreferencePair],
    prompts: &[Prompt],
    config: &IterationConfig,
    iteration: usize,
) -> Result<ToyPolicy> {
    if pairs.is_empty() {
        log::info!("iteration {iteration}: no preference pairs, skipping refinement stage");
        return Ok(policy.clone());
    }
    let classes = class_map(prompts)?;
    let mut tokenized = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let Some(&class) = classes.get(pair.prompt_id.as_str()) else {
            return Err(Error::Data(format!("pair references unknown prompt {}", pair.prompt_id)));
        };
        let chosen = policy.tokenize(&pair.chosen);
        let rejected = policy.tokenize(&pair.rejected);
        if chosen.is_empty() || rejected.is_empty() {
            log::warn!("skipping pair for {} with an empty side after tokenization", pair.prompt_id);
            continue;
        }
        tokenized.push(dpo::TokenizedPair { class, chosen, rejected });
    }
    if tokenized.is_empty() {
        log::info!("iteration {iteration}: no tokenizable pairs, skipping refinement stage");
        return Ok(policy.clone());
    }

    let reference = policy.clone();
    let mut current = policy.clone();
    for epoch in 0..config.dpo.epochs {
        let mut order: Vec<usize> = (0..tokenized.len()).collect();
        let shuffle_seed = derive_seed(
            config.run.seed,
            &["dpo-shuffle", &iteration.to_string(), &epoch.to_string()],
        );
        rand::seq::SliceRandom::shuffle(
            &mut order[..],
            &mut ChaCha8Rng::seed_from_u64(shuffle_seed),
        );
        for batch_indices in order.chunks(config.dpo.batch) {
            let batch: Vec<dpo::TokenizedPair> =
                batch_indices.iter().map(|&i| tokenized[i].clone()).collect();
            let (_, gradient) =
                dpo::dpo_batch_loss_and_grad(&current, &reference, &batch, config.dpo.beta)?;
            current = current.apply_update(&gradient, config.dpo.learning_rate)?;
        }
    }
    Ok(current)
}

/// Drop a uniformly random floor(fraction * |mastered ∩ active|) subset of
/// the mastered prompts from the active list, preserving order of the rest.
pub fn prune_mastered(
    active: &[String],
    mastered: &BTreeSet<String>,
    prune_fraction: f64,
    seed: u64,
) -> Vec<String> {
    let eligible: Vec<usize> = active
        .iter()
        .enumerate()
        .filter(|(_, id)| mastered.contains(*id))
        .map(|(index, _)| index)
        .collect();
    let remove_count = (prune_fraction * eligible.len() as f64).floor() as usize;
    if remove_count == 0 {
        return active.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let removed: HashSet<usize> = rand::seq::index::sample(&mut rng, eligible.len(), remove_count)
        .iter()
        .map(|slot| eligible[slot])
        .collect();
    active
        .iter()
        .enumerate()
        .filter(|(index, _)| !removed.contains(index))
        .map(|(_, id)| id.clone())
        .collect()
}

/// Per-response evaluation facts feeding a [`MetricsSnapshot`].
struct EvalItem {
    accuracy: f64,
    consistency: Consistency,
    length_tokens: usize,
    repetition: bool,
}

fn aggregate_metrics(items: &[EvalItem]) -> MetricsSnapshot {
    let n = items.len() as f64;
    let accuracy = items.iter().map(|i| i.accuracy).sum::<f64>() / n;
    // Accuracy credited only where reasoning agrees with the answer; this
    // keeps acc_true <= accuracy even for graded distance rewards.
    let acc_true = items
        .iter()
        .map(|i| if i.consistency == Consistency::Consistent { i.accuracy } else { 0.0 })
        .sum::<f64>()
        / n;
    let mean_length_tokens = items.iter().map(|i| i.length_tokens as f64).sum::<f64>() / n;
    let inconsistent = items
        .iter()
        .filter(|i| !matches!(i.consistency, Consistency::Consistent | Consistency::Unknown))
        .count();
    MetricsSnapshot {
        accuracy,
        acc_true,
        mean_length_tokens,
        inconsistency_rate: inconsistent as f64 / n,
        repetition_count: items.iter().filter(|i| i.repetition).count(),
    }
}

/// Greedy-decode every eval prompt and summarize accuracy, consistency,
/// length, and repetition.
pub fn compute_metrics(
    policy: &ToyPolicy,
    eval_prompts: &[Prompt],
    judge: &dyn JudgeBackend,
    verifier_config: &VerifierConfig,
) -> Result<MetricsSnapshot> {
    if eval_prompts.is_empty() {
        return Err(Error::InvalidInput("metrics need a non-empty eval set".into()));
    }
    let items = eval_prompts
        .par_iter()
        .map(|prompt| {
            let rollout = policy.greedy_rollout(&prompt.id, prompt.class()?)?;
            let reward =
                rewards::total_reward(&rollout.text, &prompt.ground_truth, prompt.qtype)?;
            let report = crate::verifier::verify_rollout(
                &rollout.text,
                &prompt.question,
                &prompt.ground_truth,
                prompt.qtype,
                judge,
                verifier_config,
            )?;
            Ok(EvalItem {
                accuracy: reward.accuracy,
                consistency: report.consistency,
                length_tokens: response_length_tokens(&rollout.text),
                repetition: report.repetition_flag,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_metrics(&items))
}

/// Mean think+answer token count over tempered samples, fixed seed.
fn mean_sampled_length(
    policy: &ToyPolicy,
    prompts: &[Prompt],
    temperature: f64,
    seed: u64,
) -> Result<f64> {
    let lengths = prompts
        .par_iter()
        .map(|prompt| {
            let rollouts = policy.sample_rollouts(
                &prompt.id,
                prompt.class()?,
                LENGTH_PROBE_SAMPLES,
                temperature,
                derive_seed(seed, &[&prompt.id]),
            )?;
            Ok(rollouts.iter().map(|r| response_length_tokens(&r.text)).sum::<usize>())
        })
        .collect::<Result<Vec<usize>>>()?;
    let total: usize = lengths.iter().sum();
    Ok(total as f64 / (prompts.len() * LENGTH_PROBE_SAMPLES) as f64)
}

fn load_dataset(path: &Path) -> Result<Vec<Prompt>> {
    let prompts: Vec<Prompt> = store::read_jsonl(path)?;
    if prompts.is_empty() {
        return Err(Error::Data(format!("dataset {} is empty", path.display())));
    }
    Ok(prompts)
}

fn save_stage_checkpoint(
    config: &IterationConfig,
    config_hash: &str,
    iteration: usize,
    stage: Stage,
    policy: &ToyPolicy,
    state: &LoopState,
) -> Result<()> {
    let payload = CheckpointPayload { policy: policy.clone(), state: state.clone() };
    store::save_checkpoint(&checkpoint_path(config, iteration, stage), config_hash, &payload)?;
    store::save_checkpoint(&latest_checkpoint_path(config), config_hash, &payload)?;
    Ok(())
}

/// Run the full loop, optionally resuming from a checkpoint written by a
/// previous invocation of the same config.
pub fn run_loop(config: &IterationConfig, resume: Option<&Path>) -> Result<LoopOutcome> {
    config.validate()?;
    let config_hash = store::config_hash(config)?;
    let activation = load_dataset(&config.paths.activation_dataset)?;
    let train = load_dataset(&config.paths.train_dataset)?;
    let eval = load_dataset(&config.paths.eval_dataset)?;
    let train_by_id: HashMap<&str, &Prompt> = train.iter().map(|p| (p.id.as_str(), p)).collect();
    let (judge, oracle) = build_backends(&config.backends)?;

    let (mut policy, mut state) = match resume {
        Some(path) => {
            let payload: CheckpointPayload = store::load_checkpoint(path, &config_hash)?;
            (payload.policy.revalidate()?, payload.state)
        }
        None => {
            let policy = init_policy(&config.policy)?;
            let baseline =
                compute_metrics(&policy, &eval, judge.as_ref(), &config.verifier)?;
            let state = LoopState {
                iteration: 0,
                stage: None,
                active_ids: train.iter().map(|p| p.id.clone()).collect(),
                mastered_ids: BTreeSet::new(),
                metrics_history: vec![baseline],
                length_probes: Vec::new(),
            };
            (policy, state)
        }
    };
    let mut completed = state.completed_rank();

    for iteration in 0..config.run.iterations {
        // Iteration 0 works the activation split; later iterations work the
        // surviving training prompts.
        let split: Vec<Prompt> = if iteration == 0 {
            activation.clone()
        } else {
            state
                .active_ids
                .iter()
                .map(|id| {
                    train_by_id
                        .get(id.as_str())
                        .copied()
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("active id {id} not in training set")))
                })
                .collect::<Result<Vec<_>>>()?
        };
        if split.is_empty() {
            log::warn!("iteration {iteration}: active dataset is empty, skipping iteration");
            if completed < iteration * 3 + 3 {
                state.iteration = iteration;
                state.stage = Some(Stage::Dpo);
                state
                    .metrics_history
                    .push(compute_metrics(&policy, &eval, judge.as_ref(), &config.verifier)?);
                save_stage_checkpoint(config, &config_hash, iteration, Stage::Dpo, &policy, &state)?;
                completed = iteration * 3 + 3;
            }
            continue;
        }

        let mut fresh_groups: Option<Vec<RolloutGroup>> = None;
        if completed < iteration * 3 + 1 {
            let (updated, groups) = run_grpo_stage(
                &policy,
                &split,
                config,
                iteration,
                &rollout_store_path(config, iteration),
            )?;
            policy = updated;
            fresh_groups = Some(groups);
            state.iteration = iteration;
            state.stage = Some(Stage::Grpo);
            save_stage_checkpoint(config, &config_hash, iteration, Stage::Grpo, &policy, &state)?;
            completed = iteration * 3 + 1;
        }

        let mut fresh_pairs: Option<Vec<PreferencePair>> = None;
        if completed < iteration * 3 + 2 {
            let groups = match fresh_groups.take() {
                Some(groups) => groups,
                None => load_final_epoch_groups(
                    &rollout_store_path(config, iteration),
                    config.grpo.group_size,
                )?,
            };
            let (pairs, mastered) = run_verifier_stage(
                &groups,
                &split,
                config,
                judge.as_ref(),
                oracle.as_ref(),
                iteration,
                &pair_store_path(config, iteration),
            )?;
            fresh_pairs = Some(pairs);
            state.mastered_ids = mastered;
            state.iteration = iteration;
            state.stage = Some(Stage::Verify);
            save_stage_checkpoint(config, &config_hash, iteration, Stage::Verify, &policy, &state)?;
            completed = iteration * 3 + 2;
        }

        if completed < iteration * 3 + 3 {
            let pairs = match fresh_pairs.take() {
                Some(pairs) => pairs,
                None => store::read_jsonl(&pair_store_path(config, iteration))?,
            };
            let probe_seed = derive_seed(config.run.seed, &["length-probe", &iteration.to_string()]);
            let before =
                mean_sampled_length(&policy, &eval, config.grpo.temperature, probe_seed)?;
            policy = run_dpo_stage(&policy, &pairs, &split, config, iteration)?;
            let after = mean_sampled_length(&policy, &eval, config.grpo.temperature, probe_seed)?;
            state.length_probes.push(LengthProbe {
                iteration,
                mean_length_before: before,
                mean_length_after: after,
            });

            state.active_ids = prune_mastered(
                &state.active_ids,
                &state.mastered_ids,
                config.run.prune_fraction,
                derive_seed(config.run.seed, &["prune", &iteration.to_string()]),
            );
            state
                .metrics_history
                .push(compute_metrics(&policy, &eval, judge.as_ref(), &config.verifier)?);
            state.iteration = iteration;
            state.stage = Some(Stage::Dpo);
            save_stage_checkpoint(config, &config_hash, iteration, Stage::Dpo, &policy, &state)?;
            completed = iteration * 3 + 3;
        }
    }

    Ok(LoopOutcome { policy, state })
}

// ---------------------------------------------------------------------------

//! Command-line front end: sampling, verification, pair building, the two
//! training stages, the full loop, and checkpoint evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use verloop::config::IterationConfig;
use verloop::orchestrator::{self, CheckpointPayload, LoopState, Stage};
use verloop::pairs::{PairStrategy, PreferencePair};
use verloop::policy::ToyPolicy;
use verloop::store;
use verloop::task::{self, Prompt};
use verloop::{Error, Result};

#[derive(Parser)]
#[command(
    name = "verloop",
    version,
    about = "Iterative rollout / verify / preference-refinement training on a toy sequence policy"
)]
struct Cli {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Checkpoint to resume from (for `loop`) or to load the policy from
    /// (for the standalone stage commands and `metrics`).
    #[arg(long, global = true, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and score one rollout group per prompt, writing a rollout store.
    Rollout {
        /// Prompt dataset; defaults to the activation split for iteration 0
        /// and the training split otherwise.
        #[arg(long, value_name = "JSONL")]
        dataset: Option<PathBuf>,
        /// Output store; defaults to <rollout_dir>/iter<N>.jsonl.
        #[arg(long, value_name = "JSONL")]
        out: Option<PathBuf>,
        /// Iteration label recorded in the store and mixed into seeds.
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// Verify a rollout store and assemble the preference-pair dataset.
    Verify {
        /// Rollout store; defaults to <rollout_dir>/iter<N>.jsonl.
        #[arg(long, value_name = "JSONL")]
        store: Option<PathBuf>,
        /// Prompt dataset; same default rule as `rollout`.
        #[arg(long, value_name = "JSONL")]
        dataset: Option<PathBuf>,
        /// Output pair dataset; defaults to <pair_dir>/iter<N>.jsonl.
        #[arg(long, value_name = "JSONL")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// Like `verify`, but keep only the listed pair strategies.
    BuildPairs {
        #[arg(long, value_name = "JSONL")]
        store: Option<PathBuf>,
        #[arg(long, value_name = "JSONL")]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "JSONL")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        /// Comma-separated strategy filter, e.g. "single_turn,reflective";
        /// empty keeps everything.
        #[arg(long, value_delimiter = ',', value_name = "NAMES")]
        strategies: Vec<String>,
    },
    /// Run one group-relative training stage and checkpoint the result.
    TrainGrpo {
        #[arg(long, value_name = "JSONL")]
        dataset: Option<PathBuf>,
        /// Checkpoint to write; defaults to <checkpoint_dir>/iter<N>_grpo.json.
        #[arg(long, value_name = "CHECKPOINT")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// Run one preference-refinement stage from a pair dataset.
    TrainDpo {
        /// Pair dataset; defaults to <pair_dir>/iter<N>.jsonl.
        #[arg(long, value_name = "JSONL")]
        pairs: Option<PathBuf>,
        #[arg(long, value_name = "JSONL")]
        dataset: Option<PathBuf>,
        /// Checkpoint to write; defaults to <checkpoint_dir>/iter<N>_dpo.json.
        #[arg(long, value_name = "CHECKPOINT")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// Run the full iteration loop (optionally resumed via --resume).
    Loop,
    /// Evaluate a checkpoint on the eval split and print a metrics snapshot.
    Metrics,
    /// Generate the synthetic dataset splits declared in the config.
    GenData,
    /// Print a config file with every default spelled out.
    GenConfig {
        /// Desk-scale preset (small batches, aggressive learning rates)
        /// instead of the reference defaults.
        #[arg(long)]
        toy: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => IterationConfig::load(path)?,
        None => IterationConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.run.seed = seed;
    }
    config.validate()?;

    match cli.command {
        Command::Rollout { dataset, out, iteration } => {
            let prompts = load_split(&config, dataset.as_deref(), iteration)?;
            let policy = load_policy(&config, cli.resume.as_deref())?;
            let out = out.unwrap_or_else(|| rollout_store_default(&config, iteration));
            let groups =
                orchestrator::sample_rollout_store(&policy, &prompts, &config, iteration, &out)?;
            let mean_accuracy =
                groups.iter().map(|g| g.avg_accuracy).sum::<f64>() / groups.len() as f64;
            emit(json!({
                "prompts": prompts.len(),
                "groups": groups.len(),
                "mean_group_accuracy": mean_accuracy,
                "store": out,
            }));
        }
        Command::Verify { store, dataset, out, iteration } => {
            let pairs = verify_store(&config, store, dataset, out, iteration)?;
            drop(pairs);
        }
        Command::BuildPairs { store, dataset, out, iteration, strategies } => {
            let keep: Vec<PairStrategy> =
                strategies.iter().map(|name| parse_strategy(name)).collect::<Result<_>>()?;
            let out_path =
                out.clone().unwrap_or_else(|| pair_store_default(&config, iteration));
            let pairs = verify_store(&config, store, dataset, out, iteration)?;
            if !keep.is_empty() {
                let filtered: Vec<PreferencePair> =
                    pairs.into_iter().filter(|p| keep.contains(&p.strategy)).collect();
                store::write_jsonl(&out_path, &filtered)?;
                emit(json!({
                    "kept_strategies": keep,
                    "pairs_after_filter": filtered.len(),
                    "out": out_path,
                }));
            }
        }
        Command::TrainGrpo { dataset, out, iteration } => {
            let prompts = load_split(&config, dataset.as_deref(), iteration)?;
            let policy = load_policy(&config, cli.resume.as_deref())?;
            let store_path = rollout_store_default(&config, iteration);
            let (updated, groups) =
                orchestrator::run_grpo_stage(&policy, &prompts, &config, iteration, &store_path)?;
            let out = out.unwrap_or_else(|| {
                config.paths.checkpoint_dir.join(format!("iter{iteration}_grpo.json"))
            });
            save_stage(&config, &out, iteration, Stage::Grpo, &updated, &prompts)?;
            let mean_accuracy =
                groups.iter().map(|g| g.avg_accuracy).sum::<f64>() / groups.len() as f64;
            emit(json!({
                "prompts": prompts.len(),
                "mean_group_accuracy": mean_accuracy,
                "store": store_path,
                "checkpoint": out,
            }));
        }
        Command::TrainDpo { pairs, dataset, out, iteration } => {
            let prompts = load_split(&config, dataset.as_deref(), iteration)?;
            let policy = load_policy(&config, cli.resume.as_deref())?;
            let pair_path = pairs.unwrap_or_else(|| pair_store_default(&config, iteration));
            let pair_set: Vec<PreferencePair> = store::read_jsonl(&pair_path)?;
            let updated =
                orchestrator::run_dpo_stage(&policy, &pair_set, &prompts, &config, iteration)?;
            let out = out.unwrap_or_else(|| {
                config.paths.checkpoint_dir.join(format!("iter{iteration}_dpo.json"))
            });
            save_stage(&config, &out, iteration, Stage::Dpo, &updated, &prompts)?;
            emit(json!({
                "pairs": pair_set.len(),
                "checkpoint": out,
            }));
        }
        Command::Loop => {
            let outcome = orchestrator::run_loop(&config, cli.resume.as_deref())?;
            emit(json!({
                "iterations": config.run.iterations,
                "active_prompts": outcome.state.active_ids.len(),
                "mastered_prompts": outcome.state.mastered_ids.len(),
                "metrics_history": outcome.state.metrics_history,
                "length_probes": outcome.state.length_probes,
                "checkpoint": orchestrator::latest_checkpoint_path(&config),
            }));
        }
        Command::Metrics => {
            let checkpoint = cli
                .resume
                .clone()
                .unwrap_or_else(|| orchestrator::latest_checkpoint_path(&config));
            let policy = load_policy(&config, Some(&checkpoint))?;
            let eval: Vec<Prompt> = store::read_jsonl(&config.paths.eval_dataset)?;
            let (judge, _) = verloop::backends::build_backends(&config.backends)?;
            let snapshot =
                orchestrator::compute_metrics(&policy, &eval, judge.as_ref(), &config.verifier)?;
            emit(json!(snapshot));
        }
        Command::GenData => {
            let splits = [
                ("activation", &config.data.activation, &config.paths.activation_dataset),
                ("train", &config.data.train, &config.paths.train_dataset),
                ("eval", &config.data.eval, &config.paths.eval_dataset),
            ];
            let mut written = BTreeMap::new();
            for (name, split, path) in splits {
                let spec = split.to_dataset_spec(name);
                let prompts = task::generate_dataset(&spec, config.run.seed);
                store::write_jsonl(path, &prompts)?;
                written.insert(name, json!({ "prompts": prompts.len(), "path": path }));
            }
            emit(json!(written));
        }
        Command::GenConfig { toy } => {
            let preset = if toy { IterationConfig::toy() } else { IterationConfig::default() };
            print!("{}", preset.to_toml_string()?);
        }
    }
    Ok(())
}

/// Shared body of `verify` and `build-pairs`: load the store, verify every
/// rollout, write the pair dataset, print a report, return the pairs.
fn verify_store(
    config: &IterationConfig,
    store: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    iteration: usize,
) -> Result<Vec<PreferencePair>> {
    let store_path = store.unwrap_or_else(|| rollout_store_default(config, iteration));
    let prompts = load_split(config, dataset.as_deref(), iteration)?;
    let groups = orchestrator::load_final_epoch_groups(&store_path, config.grpo.group_size)?;
    let out = out.unwrap_or_else(|| pair_store_default(config, iteration));
    let (judge, oracle) = verloop::backends::build_backends(&config.backends)?;
    let (pairs, mastered) = orchestrator::run_verifier_stage(
        &groups,
        &prompts,
        config,
        judge.as_ref(),
        oracle.as_ref(),
        iteration,
        &out,
    )?;
    let mut by_strategy: BTreeMap<String, usize> = BTreeMap::new();
    for pair in &pairs {
        let name = serde_json::to_value(pair.strategy)?
            .as_str()
            .unwrap_or("unknown")
            .to_owned();
        *by_strategy.entry(name).or_insert(0) += 1;
    }
    emit(json!({
        "groups": groups.len(),
        "mastered": mastered,
        "pairs": pairs.len(),
        "pairs_by_strategy": by_strategy,
        "out": out,
    }));
    Ok(pairs)
}

fn emit(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("report serializes"));
}

fn rollout_store_default(config: &IterationConfig, iteration: usize) -> PathBuf {
    config.paths.rollout_dir.join(format!("iter{iteration}.jsonl"))
}

fn pair_store_default(config: &IterationConfig, iteration: usize) -> PathBuf {
    config.paths.pair_dir.join(format!("iter{iteration}.jsonl"))
}

/// Iteration 0 works the activation split, later iterations the training
/// split, matching the loop's schedule.
fn load_split(
    config: &IterationConfig,
    dataset: Option<&Path>,
    iteration: usize,
) -> Result<Vec<Prompt>> {
    let path = match dataset {
        Some(path) => path.to_path_buf(),
        None if iteration == 0 => config.paths.activation_dataset.clone(),
        None => config.paths.train_dataset.clone(),
    };
    let prompts: Vec<Prompt> = store::read_jsonl(&path)?;
    if prompts.is_empty() {
        return Err(Error::Data(format!("dataset {} is empty", path.display())));
    }
    Ok(prompts)
}

/// Policy from a checkpoint when given, fresh from config otherwise.
fn load_policy(config: &IterationConfig, checkpoint: Option<&Path>) -> Result<ToyPolicy> {
    match checkpoint {
        Some(path) => {
            let payload: CheckpointPayload =
                store::load_checkpoint(path, &store::config_hash(config)?)?;
            payload.policy.revalidate()
        }
        None => orchestrator::init_policy(&config.policy),
    }
}

fn save_stage(
    config: &IterationConfig,
    path: &Path,
    iteration: usize,
    stage: Stage,
    policy: &ToyPolicy,
    prompts: &[Prompt],
) -> Result<()> {
    let payload = CheckpointPayload {
        policy: policy.clone(),
        state: LoopState {
            iteration,
            stage: Some(stage),
            active_ids: prompts.iter().map(|p| p.id.clone()).collect(),
            mastered_ids: Default::default(),
            metrics_history: Vec::new(),
            length_probes: Vec::new(),
        },
    };
    store::save_checkpoint(path, &store::config_hash(config)?, &payload)
}

fn parse_strategy(name: &str) -> Result<PairStrategy> {
    serde_json::from_value(serde_json::Value::String(name.trim().to_owned()))
        .map_err(|_| Error::Config(format!("unknown pair strategy \"{name}\"")))
}

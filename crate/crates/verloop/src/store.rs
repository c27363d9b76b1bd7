//! On-disk formats: line-delimited JSON stores and atomic checkpoints.
//!
//! Every write goes through write-temp-then-rename, so a crash mid-write
//! leaves the previous file intact. Checkpoints carry a format version and a
//! hash of the generating config; loading refuses both corrupt files and
//! checkpoints produced under a different config.

use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::Rollout;
use crate::rewards::RewardBreakdown;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// One line of the rollout store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt_id: String,
    pub iteration: usize,
    pub rollout_index: usize,
    pub text: String,
    pub tokens: Vec<u32>,
    pub logprobs_old: Vec<f64>,
    pub reward: RewardBreakdown,
}

impl RolloutRecord {
    pub fn from_rollout(iteration: usize, rollout_index: usize, rollout: &Rollout) -> Self {
        Self {
            prompt_id: rollout.prompt_id.clone(),
            iteration,
            rollout_index,
            text: rollout.text.clone(),
            tokens: rollout.tokens.clone(),
            logprobs_old: rollout.logprobs_old.clone(),
            reward: rollout.reward,
        }
    }

    pub fn into_rollout(self) -> Rollout {
        Rollout {
            prompt_id: self.prompt_id,
            text: self.text,
            tokens: self.tokens,
            logprobs_old: self.logprobs_old,
            reward: self.reward,
        }
    }
}

/// Serialize records one JSON object per line and write atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buffer = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buffer, record)?;
        buffer.push(b'\n');
    }
    write_atomic(path, &buffer)
}

/// Read a line-delimited JSON file written by [`write_jsonl`]. Blank lines
/// are skipped; anything else that fails to parse reports its line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{} line {}: {e}", path.display(), index + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Versioned checkpoint envelope. The payload is whatever the caller needs
/// to persist (a bare policy, or policy plus loop state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub config_hash: String,
    pub payload: T,
}

/// Hash a config (or any serializable value) for checkpoint compatibility
/// checks. Field order is struct declaration order, so equal configs hash
/// equally across runs.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(format!("{digest:x}"))
}

pub fn save_checkpoint<T: Serialize>(path: &Path, config_hash: &str, payload: &T) -> Result<()> {
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        payload,
    };
    let json = serde_json::to_vec_pretty(&checkpoint)?;
    write_atomic(path, &json)
}

/// Load a checkpoint, refusing corrupt files, unknown format versions, and
/// config hashes that differ from `expected_config_hash`.
pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, expected_config_hash: &str) -> Result<T> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let checkpoint: Checkpoint<T> = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("corrupt checkpoint {}: {e}", path.display())))?;
    if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint {} has format version {}, this build reads {}",
            path.display(),
            checkpoint.format_version,
            CHECKPOINT_FORMAT_VERSION
        )));
    }
    if checkpoint.config_hash != expected_config_hash {
        return Err(Error::Config(format!(
            "checkpoint {} was written under a different config (hash {} vs {})",
            path.display(),
            checkpoint.config_hash,
            expected_config_hash
        )));
    }
    Ok(checkpoint.payload)
}

/// Write bytes to a sibling temp file, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let mut temp = path.to_path_buf();
    temp.set_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    {
        let mut out = fs::File::create(&temp)?;
        out.write_all(bytes)?;
    }
    fs::rename(&temp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------

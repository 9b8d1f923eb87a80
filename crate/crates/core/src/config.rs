//! Run configuration: one TOML file covering every stage, plus dotted-path
//! `--set key=value` overrides. Unknown keys are rejected before any stage
//! runs, and the resolved config is content-hashed into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::policy::PolicyConfig;
use crate::promptgen::PromptgenConfig;
use crate::reward::RewardConfig;
use crate::sft::SftConfig;
use crate::simenv::SimConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Input record files; default to the standard names under `out_dir`.
    pub users: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub events: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyShape {
    pub dim: usize,
    pub max_len: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        PolicyShape {
            dim: 64,
            max_len: 256,
        }
    }
}

impl PolicyShape {
    pub fn to_policy_config(self, vocab_size: usize) -> PolicyConfig {
        PolicyConfig {
            vocab_size,
            dim: self.dim,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    pub max_new: usize,
    /// Checkpoint to evaluate; defaults to the GRPO checkpoint when present,
    /// otherwise the SFT checkpoint.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_list: vec![5, 10],
            max_new: 32,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for intra-stage parallelism; 0 means all cores.
    /// Results are identical for any worker count.
    pub workers: usize,
    pub min_interactions: usize,
    pub min_word_freq: usize,
    pub paths: PathsConfig,
    pub sim: SimConfig,
    pub promptgen: PromptgenConfig,
    pub policy: PolicyShape,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            workers: 0,
            min_interactions: crate::corpus::DEFAULT_MIN_INTERACTIONS,
            min_word_freq: crate::tokenizer::DEFAULT_MIN_WORD_FREQ,
            paths: PathsConfig::default(),
            sim: SimConfig::default(),
            promptgen: PromptgenConfig::default(),
            policy: PolicyShape::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            reward: RewardConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.policy.dim == 0 || self.policy.max_len == 0 {
            return Err(Error::Config("policy dim and max_len must be >= 1".into()));
        }
        if self.eval.k_list.is_empty() {
            return Err(Error::Config("eval.k_list must be nonempty".into()));
        }
        if self.eval.max_new == 0 {
            return Err(Error::Config("eval.max_new must be >= 1".into()));
        }
        if self.min_word_freq == 0 {
            return Err(Error::Config("min_word_freq must be >= 1".into()));
        }
        self.sim.validate()?;
        self.promptgen.validate()?;
        self.sft.validate()?;
        self.grpo.validate()?;
        self.reward.validate()?;
        Ok(())
    }

    /// Short content hash of the resolved config; embedded in artifacts.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }

    pub fn users_path(&self) -> PathBuf {
        self.paths
            .users
            .clone()
            .unwrap_or_else(|| self.out_dir.join("users.jsonl"))
    }

    pub fn items_path(&self) -> PathBuf {
        self.paths
            .items
            .clone()
            .unwrap_or_else(|| self.out_dir.join("items.jsonl"))
    }

    pub fn events_path(&self) -> PathBuf {
        self.paths
            .events
            .clone()
            .unwrap_or_else(|| self.out_dir.join("events.jsonl"))
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // accept any TOML literal (ints, floats, bools, arrays, quoted strings);
    // fall back to a plain string
    let wrapped = format!("v = {raw}");
    if let Ok(table) = wrapped.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for seg in &segments[..segments.len() - 1] {
        table = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override key {key:?} crosses a non-table value"))
            })?;
    }
    table.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Build the effective config: file (if any), then `--set` overrides, then
/// seed/out-dir flags. Flags take precedence over the file.
pub fn resolve_config(
    config_path: Option<&Path>,
    sets: &[String],
    seed_flag: Option<u64>,
    out_dir_flag: Option<&Path>,
) -> Result<RunConfig> {
    let mut table: toml::Table = match config_path {
        None => toml::Table::new(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("bad config file {}: {e}", path.display())))?
        }
    };
    for entry in sets {
        let (key, raw) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key=value, got {entry:?}"))
        })?;
        apply_override(&mut table, key.trim(), parse_override_value(raw.trim()))?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    if let Some(dir) = out_dir_flag {
        cfg.out_dir = dir.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

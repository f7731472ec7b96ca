//! TOML run configurations. Every key has a default except paths.
//!
//! Training (`hyt train --config train.toml`):
//!
//! ```toml
//! dataset = "data/place_at.jsonl"   # demonstrations (JSON lines)
//! out_dir = "runs/hyt-s0"           # checkpoints, metrics.jsonl, vocab.json
//!
//! [train]
//! seed = 0
//! batch_size = 32
//! epochs = 60
//! checkpoint_epochs = [30, 42, 60]
//!
//! [train.modality]
//! w_act = 0.25                      # probability of an act sample
//! w_think = 0.5                     # thought then action
//! w_follow = 0.25                   # action given a thought, no task prompt
//! thought_format = "short"          # or "extended" (adds a plan clause)
//! chunk_size = 1                    # actions predicted per decision
//! action_bins = 256                 # size of the binned action bank
//! action_encoding = "axis"          # or "binned"
//!
//! [train.model]
//! d_model = 32
//! n_heads = 4
//! n_layers = 3
//! context_len = 128
//! init_scale = 0.02
//! tie_embeddings = false
//!
//! [train.optimizer]                 # Adam, constant learning rate
//! learning_rate = 3e-3
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! weight_decay = 0.0                # decoupled, applied as lr * wd * w
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use hyt_core::eval::{DecodeConfig, Mode};
use hyt_core::hyt::TrainConfig;
use hyt_core::oracle::{OracleConfig, ThoughtFormat};
use hyt_core::world::{TaskFamily, WorldConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::GenSpec;
use crate::{LabError, Result};

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    toml::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub out: PathBuf,
    #[serde(default = "default_grid")]
    pub grid_size: u8,
    #[serde(default)]
    pub thought_format: ThoughtFormat,
    #[serde(default = "one")]
    pub d_close: i32,
    #[serde(default = "one")]
    pub d_key: i32,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default = "full")]
    pub annotate_fraction: f64,
    pub tasks: Vec<GenSpec>,
}

impl GenConfig {
    pub fn world(&self) -> WorldConfig {
        WorldConfig { grid_size: self.grid_size }
    }

    pub fn oracle(&self) -> OracleConfig {
        OracleConfig { d_close: self.d_close, d_key: self.d_key, thought_format: self.thought_format }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub family: TaskFamily,
    pub n_objects: usize,
}

/// Evaluation (`hyt eval --config eval.toml`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRunConfig {
    pub checkpoint: PathBuf,
    /// Follow-mode executor for hierarchical evaluation.
    #[serde(default)]
    pub low_level_checkpoint: Option<PathBuf>,
    pub mode: Mode,
    #[serde(default = "hundred")]
    pub n_episodes: usize,
    /// Defaults to the oracle budget `4 * grid_size * n_objects`.
    #[serde(default)]
    pub max_steps: Option<u32>,
    #[serde(default = "eval_seed_base")]
    pub base_seed: u64,
    #[serde(default)]
    pub oracle_substitution: bool,
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default = "one")]
    pub d_close: i32,
    /// CSV destination; the summary is printed either way.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Mixed act/think/follow training, evaluated in act mode.
    Hyt,
    /// Act samples only.
    ActOnly,
    /// Think samples only, evaluated in think mode.
    ThinkOnly,
    /// A think-only planner feeding a follow-only executor.
    Hierarchical,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [Paradigm::Hyt, Paradigm::ActOnly, Paradigm::ThinkOnly, Paradigm::Hierarchical];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Hyt => "hyt",
            Paradigm::ActOnly => "act_only",
            Paradigm::ThinkOnly => "think_only",
            Paradigm::Hierarchical => "hierarchical",
        }
    }
}

/// Data-scaling sweep (`hyt sweep --config sweep.toml`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub out_dir: PathBuf,
    /// Demonstrations per family, split 1:2:1 over 2/3/4 objects unless
    /// `train_variant` pins one variant.
    pub sizes: Vec<usize>,
    pub families: Vec<TaskFamily>,
    #[serde(default)]
    pub train_variant: Option<usize>,
    #[serde(default = "all_paradigms")]
    pub paradigms: Vec<Paradigm>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    pub eval_variants: Vec<Variant>,
    #[serde(default = "hundred")]
    pub n_episodes: usize,
    #[serde(default = "eval_seed_base")]
    pub eval_base_seed: u64,
    #[serde(default)]
    pub data_seed_base: u64,
    #[serde(default = "default_grid")]
    pub grid_size: u8,
}

/// Oracle-thought study (`hyt oracle-follow --config study.toml`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleFollowConfig {
    /// One HyT checkpoint per seed.
    pub checkpoints: Vec<PathBuf>,
    pub variants: Vec<Variant>,
    #[serde(default = "hundred")]
    pub n_episodes: usize,
    #[serde(default = "eval_seed_base")]
    pub base_seed: u64,
    #[serde(default)]
    pub max_steps: Option<u32>,
    pub out: PathBuf,
}

fn default_grid() -> u8 {
    hyt_core::world::DEFAULT_GRID
}
fn one() -> i32 {
    1
}
fn full() -> f64 {
    1.0
}
fn hundred() -> usize {
    100
}
/// Far away from generated training seeds so evaluation is held out.
pub fn eval_seed_base() -> u64 {
    1_000_000
}
fn all_paradigms() -> Vec<Paradigm> {
    Paradigm::ALL.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_train_example_parses() {
        let doc: String = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start().to_string() + "\n")
            .collect();
        let cfg: TrainRunConfig = toml::from_str(&doc).unwrap();
        assert_eq!(cfg.train, TrainConfig::default(), "documented values drifted from the defaults");
        let minimal: TrainRunConfig = toml::from_str("dataset = \"d\"\nout_dir = \"o\"\n").unwrap();
        assert_eq!(minimal.train, TrainConfig::default());
    }
}

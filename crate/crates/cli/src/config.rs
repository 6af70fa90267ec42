//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use lanerope::attention::MaskRule;
use lanerope::bench::{BenchConfig, Profile};
use lanerope::data::{vocab, CollabConfig, CurationConfig, KtoDataConfig};
use lanerope::engine::{PromptMode, SamplingConfig, DEFAULT_TEMPERATURE, DEFAULT_TOP_P};
use lanerope::model::{init_from_base, LaneInit, LaneStrategy, ModelConfig, ModelParameters};
use lanerope::training::{KtoConfig, OptimConfig, TrainConfig};

use crate::Usage;

pub const PROFILE_ENV: &str = "LANEROPE_PROFILE";

/// Shape of a freshly initialised model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_mlp")]
    pub mlp_hidden: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub tied_embeddings: bool,
    #[serde(default = "default_lane_init")]
    pub lane_init: LaneInit,
}

fn default_vocab() -> usize {
    vocab::SIZE
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_head_dim() -> usize {
    16
}
fn default_mlp() -> usize {
    128
}
fn default_max_steps() -> usize {
    64
}
fn default_lane_init() -> LaneInit {
    LaneInit::new(LaneStrategy::Ntk, 1.0, 4)
}

impl Default for ModelSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl ModelSpec {
    pub fn config(&self) -> lanerope::Result<ModelConfig> {
        let mut cfg = ModelConfig::base(
            self.vocab_size,
            self.n_layers,
            self.n_heads,
            self.head_dim,
            self.mlp_hidden,
            self.max_steps,
        )?;
        cfg.tied_embeddings = self.tied_embeddings;
        Ok(cfg)
    }

    /// Random base model with the augmentation block added.
    pub fn build(&self, seed: u64) -> lanerope::Result<ModelParameters> {
        let base = ModelParameters::random(self.config()?, seed)?;
        init_from_base(&base, &self.lane_init)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default = "default_lanes")]
    pub lanes: usize,
    /// Samples per query; defaults to one group of `lanes`.
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    #[serde(default = "default_eos")]
    pub eos: Option<u32>,
    #[serde(default = "default_marker")]
    pub marker: Option<u32>,
    #[serde(default)]
    pub prompt_mode: PromptMode,
    #[serde(default)]
    pub mask: MaskRule,
}

fn default_lanes() -> usize {
    2
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_top_p() -> f64 {
    DEFAULT_TOP_P
}
fn default_max_new() -> usize {
    16
}
fn default_eos() -> Option<u32> {
    Some(vocab::EOS)
}
fn default_marker() -> Option<u32> {
    Some(vocab::ANS)
}

impl Default for EngineSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl EngineSection {
    pub fn sampling(&self, seed: u64) -> SamplingConfig {
        SamplingConfig {
            lanes: self.lanes,
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            top_p: self.top_p,
            seed,
            eos: self.eos,
            marker: self.marker,
            prompt_mode: self.prompt_mode,
            mask: self.mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_optim")]
    pub optim: OptimConfig,
    #[serde(default)]
    pub kto: KtoConfig,
    #[serde(default)]
    pub mask: MaskRule,
    /// Also save `step-<n>` checkpoints every this many steps.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_optim() -> OptimConfig {
    OptimConfig::new(1e-3)
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64, threads: usize) -> TrainConfig {
        let mut optim = self.optim.clone();
        optim.seed = seed;
        TrainConfig {
            optim,
            kto: self.kto.clone(),
            mask: self.mask,
            threads,
        }
    }
}

/// Bench settings: a profile plus optional overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    /// Falls back to the environment variable, then to the desk profile.
    #[serde(default)]
    pub profile: Option<Profile>,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub lanes: Option<Vec<usize>>,
    #[serde(default)]
    pub prompt_len: Option<usize>,
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default)]
    pub repeats: Option<usize>,
    #[serde(default)]
    pub warmup: Option<usize>,
    #[serde(default)]
    pub baseline: Option<bool>,
}

impl BenchSection {
    pub fn resolve(&self, seed: u64) -> Result<BenchConfig> {
        let profile = match (self.profile, std::env::var(PROFILE_ENV)) {
            (Some(p), _) => p,
            (None, Ok(v)) => v
                .parse()
                .map_err(|e| Usage(format!("{PROFILE_ENV}: {e}")))?,
            (None, Err(_)) => Profile::Desk,
        };
        let d = BenchConfig::profile(profile);
        Ok(BenchConfig {
            batch: self.batch.unwrap_or(d.batch),
            lanes: self.lanes.clone().unwrap_or(d.lanes),
            prompt_len: self.prompt_len.unwrap_or(d.prompt_len),
            checkpoints: self.checkpoints.clone().unwrap_or(d.checkpoints),
            repeats: self.repeats.unwrap_or(d.repeats),
            warmup: self.warmup.unwrap_or(d.warmup),
            baseline: self.baseline.unwrap_or(d.baseline),
            seed,
            ..d
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Episodes written by `data gen-collab`.
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_lanes")]
    pub lanes: usize,
    #[serde(default)]
    pub collab: CollabConfig,
    #[serde(default = "default_kto_data")]
    pub kto: KtoDataConfig,
    #[serde(default)]
    pub curation: CurationConfig,
}

fn default_count() -> usize {
    100
}
fn default_kto_data() -> KtoDataConfig {
    KtoDataConfig::new(default_count())
}

impl Default for DataSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// Top-level configuration; paths are relative to the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    /// Used when no input checkpoint is given.
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub checkpoint_in: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_out: Option<PathBuf>,
    /// KTO reference; defaults to the starting model.
    #[serde(default)]
    pub reference_checkpoint: Option<PathBuf>,
    /// Training data, or the input of `data curate`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub metrics_out: Option<PathBuf>,
    /// Main output file of the subcommand.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Optional second output (`data gen-collab` queries, `data curate` report).
    #[serde(default)]
    pub secondary_output: Option<PathBuf>,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub data: DataSection,
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.checkpoint_in,
            &mut cfg.checkpoint_out,
            &mut cfg.reference_checkpoint,
            &mut cfg.dataset,
            &mut cfg.metrics_out,
            &mut cfg.output,
            &mut cfg.secondary_output,
        ] {
            rebase(base, p);
        }
        Ok(cfg)
    }

    pub fn seed(&self, command: &str) -> Result<u64> {
        self.seed
            .ok_or_else(|| Usage(format!("{command} requires \"seed\" in the config")).into())
    }
}

//! Experiment configuration: one TOML document covering every section, with
//! unknown keys rejected and a resolution pass that fills derived seeds.
//!
//! Seed scheme: `seed` is the master knob for run-to-run stochasticity.
//! Section seeds left at 0 mean "derive me": the trainer and orchestrator
//! seeds come from the master seed, while the SFT seed comes from
//! `data.data_seed` so that the task — prompts, corpus, and the supervised
//! starting point — stays fixed while the master seed varies. The reward
//! seed is part of the task definition and is never derived. After
//! resolution every seed is concrete, so the echoed config reproduces the
//! run exactly.

use serde::{Deserialize, Serialize};
use warplab_core::orchestrator::SftConfig;
use warplab_core::prompts::{PromptSet, SftExample};
use warplab_core::rng::derive_seed;
use warplab_core::{ArchConfig, RewardSpec, TrainConfig, WarpConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the task itself: prompts, corpus, and (via derivation) the
    /// SFT run. Deliberately separate from the master seed.
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    #[serde(default = "default_train_prompts")]
    pub n_train_prompts: usize,
    #[serde(default = "default_eval_prompts")]
    pub n_eval_prompts: usize,
    #[serde(default = "default_corpus_size")]
    pub corpus_size: usize,
    /// Held-out supervised examples for the capability probe; 0 disables it.
    #[serde(default = "default_heldout_size")]
    pub heldout_size: usize,
    #[serde(default = "default_diversity_samples")]
    pub diversity_samples: usize,
    #[serde(default = "default_diversity_temperature")]
    pub diversity_temperature: f64,
}

fn default_data_seed() -> u64 {
    101
}
fn default_train_prompts() -> usize {
    16
}
fn default_eval_prompts() -> usize {
    8
}
fn default_corpus_size() -> usize {
    256
}
fn default_heldout_size() -> usize {
    64
}
fn default_diversity_samples() -> usize {
    6
}
fn default_diversity_temperature() -> f64 {
    0.9
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            data_seed: default_data_seed(),
            n_train_prompts: default_train_prompts(),
            n_eval_prompts: default_eval_prompts(),
            corpus_size: default_corpus_size(),
            heldout_size: default_heldout_size(),
            diversity_samples: default_diversity_samples(),
            diversity_temperature: default_diversity_temperature(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_train_prompts == 0 || self.n_eval_prompts == 0 {
            return Err(CliError::Config(
                "data.n_train_prompts and data.n_eval_prompts must be positive".into(),
            ));
        }
        if self.corpus_size == 0 {
            return Err(CliError::Config("data.corpus_size must be positive".into()));
        }
        if self.diversity_samples < 2 {
            return Err(CliError::Config(
                "data.diversity_samples must be at least 2".into(),
            ));
        }
        if !(self.diversity_temperature.is_finite() && self.diversity_temperature >= 0.0) {
            return Err(CliError::Config(
                "data.diversity_temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed for run-to-run stochasticity. Section seeds left at 0
    /// are derived from it (SFT from `data.data_seed`) during resolution.
    pub seed: u64,
    pub output_dir: String,
    pub arch: ArchConfig,
    pub reward: RewardSpec,
    pub data: DataConfig,
    pub sft: SftConfig,
    pub train: TrainConfig,
    pub warp: WarpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: "out".to_string(),
            arch: ArchConfig::default(),
            reward: RewardSpec::default(),
            data: DataConfig::default(),
            sft: SftConfig::default(),
            train: TrainConfig::default(),
            warp: WarpConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML document, apply `--set section.key=value` overrides, and
    /// reject unknown keys anywhere.
    pub fn from_toml(text: &str, sets: &[String]) -> Result<Self, CliError> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(format!("config parse: {e}")))?;
        for set in sets {
            apply_set(&mut value, set)?;
        }
        value
            .try_into()
            .map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Fill every derived seed and validate all sections. Idempotent: the
    /// echoed result resolves to itself.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        // TOML integers are i64, so derived seeds stay in the 63-bit range
        // (user-written seeds are bounded the same way by the format).
        let derive = |master: u64, label: &str| derive_seed(master, label, 0) & (i64::MAX as u64);
        if self.sft.seed == 0 {
            self.sft.seed = derive(self.data.data_seed, "sft");
        }
        if self.train.seed == 0 {
            self.train.seed = derive(self.seed, "train");
        }
        if self.train.prompt_order_seed == 0 {
            self.train.prompt_order_seed = derive(self.seed, "train-order");
        }
        if self.warp.seed == 0 {
            self.warp.seed = derive(self.seed, "warp");
        }
        self.arch.validate().map_err(CliError::from_core)?;
        self.data.validate()?;
        self.train.validate().map_err(CliError::from_core)?;
        self.warp.validate().map_err(CliError::from_core)?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_prompts(&self) -> PromptSet {
        PromptSet::generate(
            &self.arch,
            self.data.n_train_prompts,
            self.data.data_seed,
            "train-prompts",
        )
    }

    pub fn eval_prompts(&self) -> PromptSet {
        PromptSet::generate(
            &self.arch,
            self.data.n_eval_prompts,
            self.data.data_seed,
            "eval-prompts",
        )
    }

    /// Supervised corpus and held-out split. Both come from one stream so
    /// they share the motif and class structure; the held-out tail is never
    /// trained on.
    pub fn corpus_split(&self) -> (Vec<SftExample>, Vec<SftExample>) {
        let total = self.data.corpus_size + self.data.heldout_size;
        let mut all = warplab_core::prompts::synth_corpus(&self.arch, total, self.data.data_seed);
        let heldout = all.split_off(self.data.corpus_size);
        (all, heldout)
    }

    pub fn heldout(&self) -> Option<Vec<SftExample>> {
        if self.data.heldout_size == 0 {
            None
        } else {
            Some(self.corpus_split().1)
        }
    }

    pub fn reward_model(&self) -> Result<warplab_core::RewardModel, CliError> {
        warplab_core::RewardModel::new(&self.reward, self.arch.vocab_size)
            .map_err(|e| CliError::Config(format!("reward: {e}")))
    }
}

/// Apply one `section.key=value` override to a parsed TOML document. The
/// value side is parsed as a TOML literal, so strings need quotes:
/// `train.anchor_mode="fixed"`.
fn apply_set(root: &mut toml::Value, set: &str) -> Result<(), CliError> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set needs key=value, got `{set}`")))?;
    let path = path.trim();
    let parsed: toml::Value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .map_err(|e| CliError::Config(format!("--set value for `{path}`: {e}")))?
        .remove("v")
        .expect("just inserted");

    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("--set key `{path}` is malformed")));
    }
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set key `{path}`: `{k}` is not a table")))?
            .entry(*k)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| CliError::Config(format!("--set key `{path}` does not name a table entry")))?
        .insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

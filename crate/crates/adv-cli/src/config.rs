//! Run configuration: JSON file plus flat dotted-key overrides.
//!
//! Precedence: built-in defaults, then the config file, then `--set`
//! overrides, then the `ADV_SEED` environment variable for the seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use adv_core::codec::{CodecConfig, NormStats, Scheme};
use adv_core::env::EnvConfig;
use adv_core::model::train::TrainConfig;
use adv_core::verifier::VerifierConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecSettings {
    pub h: usize,
    pub d: usize,
    pub gamma: f64,
    pub q_max: u32,
    pub bins: u32,
    pub bpe_vocab_size: usize,
}

impl Default for CodecSettings {
    fn default() -> Self {
        CodecSettings {
            h: 8,
            d: 2,
            gamma: 100.0,
            q_max: 512,
            bins: 512,
            bpe_vocab_size: 2048,
        }
    }
}

impl CodecSettings {
    /// Completes the settings into a full codec config with fitted stats.
    pub fn with_norm(&self, h: usize, norm: NormStats) -> CodecConfig {
        CodecConfig {
            h,
            d: self.d,
            gamma: self.gamma,
            q_max: self.q_max,
            bins: self.bins,
            bpe_vocab_size: self.bpe_vocab_size,
            norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    /// Hidden width of the flow expert MLP.
    pub flow_hidden: usize,
    /// Conditioning feature width.
    pub feature_dim: usize,
    /// Hidden width of the context encoder.
    pub enc_hidden: usize,
    /// Scorer context window, embedding size, and hidden width.
    pub window: usize,
    pub embed_dim: usize,
    pub scorer_hidden: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            flow_hidden: 128,
            feature_dim: 32,
            enc_hidden: 64,
            window: 8,
            embed_dim: 32,
            scorer_hidden: 128,
        }
    }
}

impl ModelSettings {
    pub fn arch(&self, h: usize, d: usize, vocab_size: usize) -> adv_core::model::ModelConfig {
        adv_core::model::ModelConfig {
            h,
            d,
            feature_dim: self.feature_dim,
            enc_hidden: self.enc_hidden,
            flow_hidden: self.flow_hidden,
            window: self.window,
            embed_dim: self.embed_dim,
            scorer_hidden: self.scorer_hidden,
            vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSettings {
    /// Candidate count M.
    pub m: usize,
    /// De-noising Euler steps.
    pub steps: usize,
    /// Steps executed per policy query (defaults to open-loop chunks).
    pub replan_every: usize,
    pub max_decode_len: usize,
}

impl Default for InferSettings {
    fn default() -> Self {
        InferSettings {
            m: 16,
            steps: 4,
            replan_every: 8,
            max_decode_len: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSettings {
    /// Expert episodes to demonstrate from.
    pub episodes: usize,
    /// Gaussian action noise injected while collecting demonstrations, as a
    /// fraction of max_speed. The expert corrects the drift it causes, so
    /// the dataset also covers the off-line states a learner reaches.
    pub jitter: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            episodes: 120,
            jitter: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSettings {
    /// Training seeds every experiment averages over.
    pub train_seeds: Vec<u64>,
    /// Episodes per cell for the main evaluation and score separation.
    pub main_episodes: usize,
    /// Episodes per cell for the analysis experiments.
    pub analysis_episodes: usize,
    pub kth: Vec<usize>,
    pub noise_levels: Vec<f64>,
    /// Long-chunk counts for the recovery experiment; -1 means unlimited.
    pub recovery_n_long: Vec<i64>,
    pub h_long: usize,
    pub h_short: usize,
    /// Epochs used when fitting per-scheme scorer heads.
    pub scorer_epochs: usize,
    /// Epochs for the long-chunk flow-only model.
    pub flow_epochs: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            train_seeds: vec![1, 2, 3],
            main_episodes: 500,
            analysis_episodes: 200,
            kth: vec![1, 2, 4, 8, 16],
            noise_levels: vec![0.001, 0.01, 0.03, 0.10],
            recovery_n_long: vec![0, 1, 2, -1],
            h_long: 32,
            h_short: 5,
            scorer_epochs: 8,
            flow_epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; every substream derives from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Tokenization scheme for training, inference and the tokenize command.
    pub scheme: String,
    /// Training mode for `train`: cotrain, flow, or scorer.
    pub train_mode: String,
    pub env: EnvConfig,
    pub codec: CodecSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub verifier: VerifierConfig,
    pub infer: InferSettings,
    pub data: DataSettings,
    pub experiment: ExperimentSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            scheme: "textual_fast".to_string(),
            train_mode: "cotrain".to_string(),
            env: EnvConfig::default(),
            codec: CodecSettings::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            verifier: VerifierConfig::default(),
            infer: InferSettings::default(),
            data: DataSettings::default(),
            experiment: ExperimentSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn scheme(&self) -> Result<Scheme> {
        Scheme::parse(&self.scheme)
            .with_context(|| format!("unknown scheme {:?}; expected one of bins, fast, vla0, textual_fast", self.scheme))
    }

    /// Canonical serialized form, hashed into report manifests.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Loads a config: defaults, optional file, `key.path=value` overrides, and
/// the `ADV_SEED` environment variable.
pub fn load_config(
    file: Option<&Path>,
    overrides: &[String],
    env_seed: Option<&str>,
) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let file_tree: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        merge_into(&mut tree, file_tree)?;
    }
    for entry in overrides {
        apply_override(&mut tree, entry)?;
    }
    if let Some(seed) = env_seed {
        let seed: u64 = seed
            .trim()
            .parse()
            .with_context(|| format!("ADV_SEED must be an unsigned integer, got {seed:?}"))?;
        tree["seed"] = serde_json::json!(seed);
    }
    let cfg: RunConfig =
        serde_json::from_value(tree).context("config does not match the expected shape")?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.scheme()?;
    if !matches!(cfg.train_mode.as_str(), "cotrain" | "flow" | "scorer") {
        bail!(
            "unknown train_mode {:?}; expected cotrain, flow, or scorer",
            cfg.train_mode
        );
    }
    if cfg.infer.replan_every == 0 {
        bail!("infer.replan_every must be at least 1");
    }
    if cfg.infer.m == 0 || cfg.infer.steps == 0 {
        bail!("infer.m and infer.steps must be at least 1");
    }
    if cfg.experiment.train_seeds.is_empty() {
        bail!("experiment.train_seeds must not be empty");
    }
    Ok(())
}

/// Key paths in the file must already exist in the defaults; this rejects
/// typos instead of silently ignoring them.
fn merge_into(base: &mut serde_json::Value, incoming: serde_json::Value) -> Result<()> {
    merge_at(base, incoming, &mut Vec::new())
}

fn merge_at(
    base: &mut serde_json::Value,
    incoming: serde_json::Value,
    path: &mut Vec<String>,
) -> Result<()> {
    match incoming {
        serde_json::Value::Object(map) => {
            for (key, value) in map {
                path.push(key.clone());
                let slot = base
                    .get_mut(&key)
                    .with_context(|| format!("unknown config key {}", path.join(".")))?;
                merge_at(slot, value, path)?;
                path.pop();
            }
            Ok(())
        }
        other => {
            *base = other;
            Ok(())
        }
    }
}

fn apply_override(tree: &mut serde_json::Value, entry: &str) -> Result<()> {
    let (key, raw_value) = entry
        .split_once('=')
        .with_context(|| format!("override {entry:?} must look like key.path=value"))?;
    let mut slot = &mut *tree;
    for part in key.split('.') {
        slot = slot
            .get_mut(part)
            .with_context(|| format!("unknown config key {key:?}"))?;
    }
    // Values parse as JSON when possible, otherwise as a bare string.
    let value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    *slot = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = load_config(None, &[], None).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.infer.m, 16);
        assert_eq!(cfg.infer.steps, 4);
        assert_eq!(cfg.train.beta, 3.0);
        assert_eq!(cfg.codec.bins, 512);
    }

    #[test]
    fn overrides_beat_file_and_env_beats_all_for_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 7, "train": {"beta": 1.0}}"#).unwrap();
        let cfg = load_config(
            Some(&path),
            &["train.beta=2.5".to_string(), "scheme=fast".to_string()],
            Some("99"),
        )
        .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.train.beta, 2.5);
        assert_eq!(cfg.scheme, "fast");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"sedd": 7}"#).unwrap();
        assert!(load_config(Some(&path), &[], None).is_err());
        assert!(load_config(None, &["nope.key=1".to_string()], None).is_err());
        assert!(load_config(None, &["seed".to_string()], None).is_err());
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(load_config(None, &["scheme=\"nope\"".to_string()], None).is_err());
        assert!(load_config(None, &["infer.replan_every=0".to_string()], None).is_err());
        assert!(load_config(None, &["train_mode=\"warp\"".to_string()], None).is_err());
        assert!(load_config(None, &[], Some("not-a-number")).is_err());
    }
}

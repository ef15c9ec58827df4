//! Generation settings: built-in defaults, overridden by a TOML file,
//! overridden by flags.

use std::path::Path;

use anyhow::Context;
use selfcross::{DenoiserConfig, SamplerConfig};
use serde::{Deserialize, Serialize};

pub const START_TOKEN: &str = "<|startoftext|>";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub prompt: Option<String>,
    pub subjects: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub sampler: SamplerConfig,
    pub denoiser: DenoiserConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| crate::usage(format!("{}: {e}", path.display())))
    }
}

/// Settings a run actually used, as recorded in the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub prompt: String,
    pub tokens: Vec<String>,
    pub subjects: Vec<usize>,
    pub seeds: Vec<u64>,
    /// `seed` here is replaced by each entry of `seeds`.
    pub sampler: SamplerConfig,
    pub denoiser: DenoiserConfig,
}

/// Start token followed by the whitespace-separated words of `prompt`.
pub fn tokenize(prompt: &str) -> Vec<String> {
    std::iter::once(START_TOKEN.to_string())
        .chain(prompt.split_whitespace().map(str::to_string))
        .collect()
}

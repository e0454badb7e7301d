//! Flat TOML run configuration. Every key is optional; command-line flags
//! take precedence over file values.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub checkpoint: Option<String>,
    pub corpus: Option<String>,
    pub samples: Option<String>,
    pub aux: Option<String>,
    pub plan: Option<String>,
    pub out_dir: Option<String>,
    pub seed: Option<u64>,
    pub corpus_seed: Option<u64>,
    pub format: Option<String>,
    pub steps: Option<usize>,
    pub strategy: Option<String>,
    pub search_range: Option<String>,
    pub aux_kind: Option<String>,
    pub aux_subsample: Option<usize>,
    pub k: Option<usize>,
    pub keyword_k: Option<usize>,
    pub max_flips: Option<usize>,
    pub benign_weight: Option<f64>,
    pub protect: Option<String>,
    pub selection: Option<String>,
    pub pages: Option<u64>,
    pub page_size_bits: Option<u32>,
    pub density_zero_to_one: Option<f64>,
    pub density_one_to_zero: Option<f64>,
    pub profile_seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

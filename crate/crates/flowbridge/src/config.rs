//! JSON run configurations, one per command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use flowbridge_core::alignment::{AlignmentConfig, PropertyCriterion};
use flowbridge_core::backbone::{SamplerConfig, TrainConfig};
use flowbridge_core::molecule::Vocabulary;
use flowbridge_core::toydata::ToyDatasetConfig;

use crate::error::CliError;

/// Reads a config file and rejects unknown or malformed fields.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn default_clash_radius() -> f64 {
    1.2
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(default)]
    pub dataset: ToyDatasetConfig,
    /// JSONL, one complex per line.
    pub output: PathBuf,
    /// Defaults to `<output>.stats.json`.
    #[serde(default)]
    pub stats: Option<PathBuf>,
    /// Optional per-complex property table (CSV) for `eval`.
    #[serde(default)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub history: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Read from the dataset's stats sidecar when absent.
    #[serde(default)]
    pub vocabulary: Option<Vocabulary>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionSpec {
    pub name: String,
    pub higher_is_better: bool,
    /// Defaults to a quarter of the property's standard deviation over the samples.
    #[serde(default)]
    pub threshold: Option<f64>,
}

/// Shared by `align` and `finetune`; fine-tuning uses `alignment.optim` only.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AlignRunConfig {
    pub checkpoint: PathBuf,
    /// Existing preference pairs (JSONL). When absent, pairs are sampled on `contexts`.
    #[serde(default)]
    pub pairs: Option<PathBuf>,
    #[serde(default)]
    pub contexts: Option<PathBuf>,
    #[serde(default)]
    pub max_contexts: Option<usize>,
    #[serde(default = "default_per_context")]
    pub per_context: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub criteria: Vec<CriterionSpec>,
    #[serde(default = "default_clash_radius")]
    pub clash_radius: f64,
    /// Contexts for validity-based epoch selection.
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    pub output: PathBuf,
    #[serde(default)]
    pub history: Option<PathBuf>,
    /// Where to write the pairs that were sampled.
    #[serde(default)]
    pub pairs_output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_per_context() -> usize {
    4
}

impl CriterionSpec {
    pub fn resolve(&self, threshold: f64) -> PropertyCriterion {
        PropertyCriterion { name: self.name.clone(), higher_is_better: self.higher_is_better, threshold: self.threshold.unwrap_or(threshold) }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRunConfig {
    pub checkpoint: PathBuf,
    /// Complexes whose contexts are sampled for (JSONL).
    pub contexts: PathBuf,
    #[serde(default)]
    pub max_contexts: Option<usize>,
    #[serde(default = "default_one")]
    pub n_per_context: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Generated molecules (JSONL).
    pub output: PathBuf,
    /// Per-sample summary (CSV); defaults to `<output>.csv`.
    #[serde(default)]
    pub table: Option<PathBuf>,
    #[serde(default = "default_clash_radius")]
    pub clash_radius: f64,
    /// Slack on the bond distance bands for the `valid` column.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_tol() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRunConfig {
    /// Generated-sample table (CSV).
    pub samples: PathBuf,
    /// Reference table (CSV); bin edges come from here.
    pub reference: PathBuf,
    /// JSON `{ "continuous": [...], "categorical": [...] }`.
    pub schema: PathBuf,
    /// Further sample tables compared against the reference and in the p-value matrix.
    #[serde(default)]
    pub others: BTreeMap<String, PathBuf>,
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    #[serde(default = "default_boot_size")]
    pub boot_size: usize,
    #[serde(default = "default_hist_bins")]
    pub hist_bins: usize,
    #[serde(default = "default_joint_bins")]
    pub joint_bins: usize,
    #[serde(default)]
    pub joint_columns: Vec<String>,
    pub output_json: PathBuf,
    pub output_csv: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_boot() -> usize {
    20
}

fn default_boot_size() -> usize {
    500
}

fn default_hist_bins() -> usize {
    100
}

fn default_joint_bins() -> usize {
    10
}

//! Run and decision configuration files.

use std::path::{Path, PathBuf};

use bayesmap::{FitOptions, LikelihoodConfig, PriorConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Which basis the map is expanded in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    /// Orthonormal under the prior; empirical Gram for priors without a
    /// classical family.
    #[default]
    Prior,
    EmpiricalGram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub family: BasisFamily,
    pub degree: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            family: BasisFamily::Prior,
            degree: 3,
        }
    }
}

/// Likelihoods whose observations can be read from a CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Feature columns plus a 0/1 `label` column.
    LogisticRegression,
    /// One `count` column, one row per coordinate.
    PoissonCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub kind: DataKind,
    pub path: PathBuf,
}

/// Contents of a `fit` / `diagnose` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    pub prior: PriorConfig,
    /// Inline likelihood with its observations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likelihood: Option<LikelihoodConfig>,
    /// Observations read from CSV instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub solver: FitOptions,
}

fn default_n_train() -> usize {
    1000
}

fn default_n_eval() -> usize {
    10_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `|a - x|^2`.
    Squared,
    /// `sum_k |a_k - x_k|`.
    Absolute,
    /// Actions are 0/1 vectors; `a_k = 1` claims `|x_k| > tau`, one unit of
    /// loss per wrong claim.
    Threshold,
}

/// Contents of a `decide` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_eval")]
    pub n: usize,
    pub loss: LossKind,
    #[serde(default)]
    pub tau: f64,
    pub actions: Vec<Vec<f64>>,
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
    parse_toml(&text, path)
}

pub fn parse_toml<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T, CliError> {
    toml::from_str(text)
        .map_err(|e| CliError::input(format!("config {}: {}", path.display(), e.message())))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String, CliError> {
    toml::to_string(value).map_err(|e| CliError::input(format!("cannot serialise config: {e}")))
}

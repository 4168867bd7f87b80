//! Experiment files.

use std::fs;
use std::path::{Path, PathBuf};

use grpo_core::rewards::{load_reward_spec, RewardSpec};
use grpo_core::{Algorithm, EnvSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Both,
}

impl Format {
    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }

    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_format() -> Format {
    Format::Both
}
fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Grpo, Algorithm::GrpoPlusPlus]
}
fn default_seeds() -> u64 {
    10
}
fn default_window() -> f64 {
    0.1
}
fn default_k() -> usize {
    5
}
fn default_n_per_class() -> usize {
    20
}
fn default_temperature() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    /// Number of seeds, starting at `first_seed`.
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default)]
    pub first_seed: u64,
    /// Fraction of steps in the start and final windows.
    #[serde(default = "default_window")]
    pub window: f64,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            algorithms: default_algorithms(),
            seeds: default_seeds(),
            first_seed: 0,
            window: default_window(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: default_k(),
            n_per_class: default_n_per_class(),
            temperature: default_temperature(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Penalty table; relative paths resolve against the config file's
    /// directory. Omit to use the bundled table.
    #[serde(default)]
    pub reward_spec: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_format")]
    pub format: Format,
    pub train: TrainConfig,
    pub env: EnvSpec,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// A validated config with its reward table loaded.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub reward_spec: RewardSpec,
}

/// The config as actually used, echoed into every JSON artifact.
#[derive(Serialize)]
pub struct Resolved<'a> {
    #[serde(flatten)]
    pub config: &'a ExperimentConfig,
    pub reward_table: &'a RewardSpec,
}

impl Loaded {
    pub fn resolved(&self) -> Resolved<'_> {
        Resolved {
            config: &self.config,
            reward_table: &self.reward_spec,
        }
    }
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<Loaded, CliError> {
    let mut config: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
    config.env = config.env.resolved();
    config.env.validate()?;
    config.train.validate()?;
    validate_compare(&config.compare)?;
    if config.eval.k == 0 {
        return Err(CliError::Validation("eval.k must be >= 1".into()));
    }

    let reward_spec = match &config.reward_spec {
        None => RewardSpec::bundled(),
        Some(path) => {
            let full = base_dir.join(path);
            if !full.is_file() {
                return Err(CliError::Validation(format!(
                    "reward_spec: file not found: {}",
                    full.display()
                )));
            }
            let spec = load_reward_spec(&full)?;
            config.reward_spec = Some(full);
            spec
        }
    };
    Ok(Loaded {
        config,
        reward_spec,
    })
}

pub fn load_config(path: &Path) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

fn validate_compare(c: &CompareSection) -> Result<(), CliError> {
    let mut algs = c.algorithms.clone();
    algs.sort_by_key(|a| a.name());
    algs.dedup();
    if algs.len() != 2 || c.algorithms.len() != 2 {
        return Err(CliError::Validation(
            "compare.algorithms must list grpo and grpopp once each".into(),
        ));
    }
    if c.seeds == 0 {
        return Err(CliError::Validation("compare.seeds must be >= 1".into()));
    }
    if !(c.window > 0.0 && c.window <= 1.0) {
        return Err(CliError::Validation(format!(
            "compare.window must lie in (0, 1], got {}",
            c.window
        )));
    }
    Ok(())
}

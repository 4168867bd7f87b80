//! On-disk outputs: CSV tables, JSON reports and checkpoints.
//!
//! Column layouts are listed in `schemas/csv-v1.toml` at the repository root.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use grpo_core::eval::ClassMetrics;
use grpo_core::{make_env, EnvSpec, PolicyParams, StepRow, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "grpo-lab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const TRAIN_COLUMNS: [&str; 9] = [
    "step",
    "iteration",
    "mean_reward",
    "empty_set_fraction",
    "standard_groups",
    "penalty_groups",
    "grad_norm",
    "objective",
    "clipped_fraction",
];
pub const COMPARE_COLUMNS: [&str; 4] = ["step", "grpo_reward", "grpopp_reward", "seed"];
pub const METRICS_COLUMNS: [&str; 5] = ["class", "precision", "recall", "f1", "support"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub step: usize,
    pub grpo_reward: f64,
    pub grpopp_reward: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-class rows followed by a `macro` row whose support is the item count.
pub fn metrics_rows(m: &ClassMetrics) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = m
        .per_class
        .iter()
        .map(|r| MetricsRow {
            class: r.label.name().to_string(),
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            support: r.support,
        })
        .collect();
    rows.push(MetricsRow {
        class: "macro".to_string(),
        precision: m.macro_precision,
        recall: m.macro_recall,
        f1: m.macro_f1,
        support: m.per_class.iter().map(|r| r.support).sum(),
    });
    rows
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, columns: &[&str], rows: &[T]) -> Result<(), CliError> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    // Written explicitly so an empty table still carries its header.
    writer
        .write_record(columns)
        .map_err(|e| io_error(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| io_error(path, e))?;
    }
    writer.flush().map_err(|e| io_error(path, e))
}

pub fn write_train_csv(path: &Path, rows: &[StepRow]) -> Result<(), CliError> {
    write_csv(path, &TRAIN_COLUMNS, rows)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| io_error(path, e))?;
    out.write_all(b"\n").map_err(|e| io_error(path, e))?;
    out.flush().map_err(|e| io_error(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: Option<TrainConfig>,
    pub env: EnvSpec,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn new(config: Option<TrainConfig>, env: EnvSpec, params: PolicyParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config,
            env,
            params,
        }
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CliError> {
    write_json(path, checkpoint)
}

/// Loads a checkpoint and checks it matches the environment it names.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", path.display())))?;
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        return Err(CliError::Validation(format!(
            "checkpoint {}: unsupported format {} v{}",
            path.display(),
            ckpt.format,
            ckpt.version
        )));
    }
    let env = make_env(&ckpt.env)?;
    if env.policy_shape() != ckpt.params.shape() {
        return Err(CliError::Validation(format!(
            "checkpoint {}: parameter shape {:?} does not match environment shape {:?}",
            path.display(),
            ckpt.params.shape(),
            env.policy_shape()
        )));
    }
    Ok(ckpt)
}

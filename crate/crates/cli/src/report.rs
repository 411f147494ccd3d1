//! JSON run reports. Everything in a [`RunReport`] is a pure function of the
//! inputs and seed; wall-clock time lives in a separate [`Timing`] file so
//! reports stay byte-identical across reruns.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dbgl::codebook::UtilizationReport;
use dbgl::data::{Dataset, LeaveOut, Splits};
use dbgl::model::{AblationFlags, Evaluation, TrainHistory};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub variables: Vec<String>,
    pub n_classes: usize,
    pub t_max: f64,
    pub sizes: SplitSizes,
}

impl DatasetSummary {
    pub fn of(splits: &Splits) -> Self {
        let d: &Dataset = &splits.train;
        Self {
            variables: d.variables.clone(),
            n_classes: d.n_classes,
            t_max: d.t_max,
            sizes: SplitSizes {
                train: splits.train.len(),
                val: splits.val.len(),
                test: splits.test.len(),
            },
        }
    }
}

/// Metrics with a set of variables hidden from validation and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub leave_out: LeaveOut,
    pub metrics: BTreeMap<String, Evaluation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub command: String,
    pub config: RunConfig,
    pub flags: AblationFlags,
    pub dataset: DatasetSummary,
    /// Variables hidden during training (train only).
    pub leave_out: Option<LeaveOut>,
    /// Loss and metrics keyed by split name; empty splits are absent.
    pub metrics: BTreeMap<String, Evaluation>,
    pub history: Option<TrainHistory>,
    pub codebook_utilization: Option<UtilizationReport>,
    /// One entry per evaluated leave-out rate (eval only).
    pub sweep: Vec<SweepEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub command: String,
    pub wall_clock_seconds: f64,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

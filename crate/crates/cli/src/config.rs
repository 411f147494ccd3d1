//! Run configuration. A TOML or JSON file sets any subset of the keys below;
//! command-line flags carry the same names and override the file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dbgl::analysis::AutocorrConfig;
use dbgl::data::{SplitRatios, SplitUnit, SyntheticConfig};
use dbgl::model::{AblationFlags, DbglConfig};
use serde::{Deserialize, Serialize};

/// The five hiding rates of the robustness sweep.
pub const SWEEP_RATES: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Copied into the model and generator sections and used
    /// for splitting and variable hiding.
    pub seed: u64,
    /// Dataset directory. Without it, data comes from `synthetic`.
    pub data: Option<PathBuf>,
    /// Fixed horizon; by default the largest timestamp over all splits.
    pub t_max: Option<f64>,
    pub split: SplitRatios,
    pub split_unit: SplitUnit,
    /// Z-score values with training statistics.
    pub normalize: bool,
    pub synthetic: SyntheticConfig,
    pub model: DbglConfig,
    /// Components to switch off: tde, sna, hvs, cb, mcv, te.
    pub ablate: Vec<String>,
    /// Fraction of variables hidden in validation and test.
    pub leave_out: Option<f64>,
    /// Evaluate at every rate in [`SWEEP_RATES`].
    pub sweep: bool,
    pub checkpoint: Option<PathBuf>,
    pub analysis: AutocorrConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            t_max: None,
            split: SplitRatios::default(),
            split_unit: SplitUnit::default(),
            normalize: true,
            synthetic: SyntheticConfig::default(),
            model: DbglConfig::default(),
            ablate: Vec::new(),
            leave_out: None,
            sweep: false,
            checkpoint: None,
            analysis: AutocorrConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(anyhow::Error::from)
        } else {
            toml::from_str(&text).map_err(anyhow::Error::from)
        };
        parsed.with_context(|| format!("parsing config {}", path.display()))
    }

    /// Propagates the master seed and checks cross-field consistency.
    pub fn resolved(mut self) -> Result<Self> {
        self.model.seed = self.seed;
        self.synthetic.seed = self.seed;
        self.flags()?;
        self.model.validate()?;
        if let Some(r) = self.leave_out {
            if !(0.0..1.0).contains(&r) {
                bail!("leave-out rate {r} outside [0, 1)");
            }
        }
        if let Some(t) = self.t_max {
            if !(t > 0.0 && t.is_finite()) {
                bail!("t_max must be positive, got {t}");
            }
        }
        Ok(self)
    }

    pub fn flags(&self) -> Result<AblationFlags> {
        let mut flags = AblationFlags::default();
        for name in &self.ablate {
            flags.disable(name)?;
        }
        Ok(flags.normalized())
    }

    /// Leave-out rates an evaluation covers, in order.
    pub fn leave_out_rates(&self) -> Vec<f64> {
        if self.sweep {
            SWEEP_RATES.to_vec()
        } else {
            self.leave_out.into_iter().collect()
        }
    }
}

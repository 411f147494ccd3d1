//! JSON checkpoints: config, flags, normalization, horizon and every parameter
//! tensor with its shape. Values are stored as 64-bit floats and parse back
//! bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AblationFlags, Dbgl, DbglConfig};
use crate::data::NormStats;
use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "dbgl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: DbglConfig,
    pub flags: AblationFlags,
    pub n_vars: usize,
    pub variables: Vec<String>,
    pub norm: Option<NormStats>,
    #[serde(default)]
    pub t_max: Option<f64>,
    pub tensors: Vec<CheckpointTensor>,
}

impl<S: Scalar> Dbgl<S> {
    pub fn to_checkpoint(&self, variables: &[String]) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            flags: self.flags,
            n_vars: self.n_vars,
            variables: variables.to_vec(),
            norm: self.norm.clone(),
            t_max: self.t_max,
            tensors: self
                .params
                .iter()
                .map(|(name, t)| CheckpointTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|x| x.widen()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model; the parameter layout must match what the stored
    /// config and flags produce.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Compatibility(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut model = Self::new(ck.config.clone(), ck.flags, ck.n_vars)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        let stored: Vec<(String, Vec<usize>)> = ck.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != stored {
            return Err(Error::Compatibility("checkpoint parameters do not match its config".into()));
        }
        let mut params = ParamSet::new();
        for t in &ck.tensors {
            params.insert(t.name.clone(), Tensor::from_f64(t.shape.clone(), &t.data)?)?;
        }
        model.params = params;
        model.norm = ck.norm.clone();
        model.t_max = ck.t_max;
        Ok(model)
    }

    pub fn save(&self, path: &Path, variables: &[String]) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint(variables))?;
        fs::write(path, json)?;
        Ok(())
    }

    /// Loads a model and the variable names it was trained on.
    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok((Self::from_checkpoint(&ck)?, ck.variables))
    }
}

//! Dynamic bipartite graph learning for irregularly sampled multivariate
//! time series.
//!
//! Each time step of a batch becomes a patient–variable bipartite graph whose
//! edges are the observations made at that step. Edge-aware message passing,
//! per-variable learned decay of hidden states, and a soft prototype codebook
//! feed a classification head. The crate also ships the data pipeline,
//! classification and calibration metrics, and the decay-rate analysis.
//!
//! The numeric stack is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to one precision.

pub mod analysis;
pub mod codebook;
pub mod data;
pub mod diffcore;
mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rng;
mod scalar;
pub mod temporal;

pub use diffcore::{AdamConfig, AdamState, Bound, ParamSet, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Dbgl64 = model::Dbgl<f64>;
pub type Dbgl32 = model::Dbgl<f32>;

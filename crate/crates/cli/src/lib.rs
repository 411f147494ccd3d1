//! Command-line surface of the DBGL toolkit: run configuration, JSON
//! reports and the `synth`, `train`, `eval`, `analyze` and `gradcheck`
//! commands as callable functions.

pub mod commands;
pub mod config;
pub mod report;

pub use config::RunConfig;
pub use report::RunReport;

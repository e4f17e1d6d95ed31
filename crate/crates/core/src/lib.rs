//! Trajectory verification for multimodal agents: prompt assembly, model
//! gateway, verdict parsing, metrics, online supervision and subset selection.

pub mod model;
pub mod prompt;
pub mod store;
pub mod exec;
pub mod gateway;
pub mod verifier;
pub mod metrics;
pub mod supervision;
pub mod sim;
pub mod subset;
pub mod run;

//! Graph and feedforward estimators for distribution-system state
//! estimation, together with the synthetic data pipeline that feeds them
//! and the diagnostics used to interpret them.

pub mod diagnostics;
pub mod diff;
pub mod grid;
pub mod harness;
pub mod measurement;
pub mod models;
pub mod powerflow;
pub mod seeds;

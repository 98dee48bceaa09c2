//! Experiment runner for subspace-recovery anomaly detection: config
//! parsing ([`config`]) and per-seed execution with artifact emission
//! ([`experiment`]).

pub mod config;
pub mod experiment;

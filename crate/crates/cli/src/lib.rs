//! Experiment driver for shortcut debiasing: dataset generation, training,
//! evaluation, sweeps and the full reproduction report.

pub mod commands;
pub mod config;
pub mod data;
pub mod plan;
pub mod reproduce;
pub mod run;
pub mod summary;

pub use config::ExperimentConfig;

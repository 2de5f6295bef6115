//! Experiment orchestration: configuration, the resumable stage pipeline
//! and report emission.

pub mod config;
pub mod report;
pub mod stages;

pub use config::{AlignSource, ExperimentConfig, HmmData, Method};
pub use report::{emit_report, fmt_tenths, Agreement, CellStats, ExperimentReport};
pub use stages::{entry_components, entry_observations, observations, Layout, Pipeline, RunSummary, Stage};

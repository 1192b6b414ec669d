//! Library side of the `optperf` command: configuration and the pipeline
//! stages, usable from tests without spawning the binary.

pub mod config;
pub mod stages;

use thiserror::Error;

pub use config::PipelineConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Stage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 1,
        }
    }
}

pub const STAGES: [&str; 6] = [
    "scan",
    "crawl",
    "download",
    "analyze",
    "attribute",
    "report",
];

/// Stages that send traffic to the targets.
pub fn touches_network(stage: &str) -> bool {
    matches!(stage, "scan" | "crawl" | "download" | "pipeline")
}

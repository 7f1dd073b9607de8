pub mod action;
pub mod control;
pub mod engine;
pub mod experiment;
pub mod intelligence;
pub mod report;
pub mod simcluster;
pub mod stats;
pub mod telemetry;

use serde::{Deserialize, Serialize};

/// Operating mode of one trial arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Cpe,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Cpe => "cpe",
        }
    }
}

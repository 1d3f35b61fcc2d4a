//! Experiment runner for sink-aware attention recalibration on the toy
//! instruction-following benchmark: suite runs, sweeps, heatmap dumps and
//! report audits.

use std::path::{Path, PathBuf};

pub mod audit;
pub mod config;
pub mod heatmap;
pub mod run;
pub mod sweep;

pub use audit::{audit, Audit};
pub use config::{Axis, PolicySource, RunConfig, SuiteRef, SweepSpec, TrainSpec};
pub use heatmap::dump_heatmaps;
pub use run::{load_policy, load_suites, persist, run, run_policy, run_with, LoadedSuite, RunOutput};
pub use sweep::{sweep, SweepReport};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Lookup(String),
    #[error(transparent)]
    Core(#[from] igar_core::error::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} episode(s) failed")]
    EpisodeFailures(usize),
    #[error("audit failed: {0}")]
    Audit(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }

    /// Process exit status: 1 configuration/startup, 2 failed episodes,
    /// 3 audit failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::EpisodeFailures(_) => 2,
            HarnessError::Audit(_) => 3,
            _ => 1,
        }
    }
}

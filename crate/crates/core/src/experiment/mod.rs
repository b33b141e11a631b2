//! Experiment procedure: define steady state, split users into control and
//! experiment groups, introduce faults for the experiment group, then try
//! to refute the hypothesis that both groups keep the same steady state.

mod groups;
mod report;
mod runner;
mod spec;
mod stats;

use thiserror::Error;

pub use groups::{assign_groups, GroupAssignment, GroupSizes};
pub use report::{
    parse_report, replay, write_outputs, DeviationReport, ExperimentReport, GuardrailSample, ReportSeries, Snapshot,
    WrittenFiles,
};
pub use runner::{run_batch, run_experiment, run_experiment_with, run_resolved, should_abort, RunOptions, RunOutput};
pub use spec::{
    parse_spec, parse_spec_value, resolve_topology_value, validate_spec, AbortPolicy, BaselineSpec, ExperimentSpec,
    GroupSpec, Resolved,
};
pub use stats::{
    evaluate_hypothesis, permutation_p_value, relative_effect, AbortRecord, Mode, Status, StatsError, Verdict,
    MIN_WINDOWS,
};

use crate::metrics::MetricsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("report has no spec snapshot")]
    MissingSnapshot,
    #[error("replay diverged at {field}{}", .window.map(|w| format!(" window {w}")).unwrap_or_default())]
    ReplayMismatch { field: String, window: Option<usize> },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ExperimentError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        ExperimentError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            ExperimentError::Config { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Whether the error stems from the input documents.
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config { .. } | ExperimentError::MissingSnapshot)
    }
}

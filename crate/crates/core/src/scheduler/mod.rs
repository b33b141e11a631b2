//! Cadenced execution of registered experiments with a hash-chained run
//! history. Cadences use wall-clock time; each run uses simulated time.

mod cadence;
mod history;

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cadence::Cadence;
pub use history::{mark_stale, NewRun, RunHistory, RunRecord, GENESIS};

use crate::experiment::{ExperimentError, ExperimentReport, Status};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid cadence: {0}")]
    InvalidCadence(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("history chain broken at record {0}")]
    BrokenChain(usize),
    #[error("history: {0}")]
    History(String),
    #[error("io: {0}")]
    Io(String),
}

fn enabled() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub name: String,
    pub cadence: Cadence,
    /// Path of the experiment spec, relative to the schedule file.
    pub spec: String,
    #[serde(default = "enabled")]
    pub enabled: bool,
}

/// Schedule file: the registered schedules plus where results go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFile {
    pub schedules: Vec<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<String>,
}

pub fn parse_schedule_file(text: &str) -> Result<ScheduleFile, ScheduleError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let f: ScheduleFile = serde_path_to_error::deserialize(de).map_err(|e| ScheduleError::Config {
        path: e.path().to_string(),
        message: e.into_inner().to_string(),
    })?;
    for (i, s) in f.schedules.iter().enumerate() {
        s.cadence.validate().map_err(|e| ScheduleError::Config {
            path: format!("schedules[{i}].cadence"),
            message: e.to_string(),
        })?;
        if s.name.trim().is_empty() {
            return Err(ScheduleError::Config {
                path: format!("schedules[{i}].name"),
                message: "must not be empty".into(),
            });
        }
    }
    Ok(f)
}

/// Next fire time at or after `now` of every enabled schedule.
pub fn next_due(schedules: &[Schedule], now: DateTime<Utc>) -> Vec<(&Schedule, DateTime<Utc>)> {
    schedules
        .iter()
        .filter(|s| s.enabled)
        .map(|s| (s, s.cadence.next_at_or_after(now)))
        .collect()
}

/// Enabled schedules with a fire time in `(since, now]`.
pub fn due_between(schedules: &[Schedule], since: DateTime<Utc>, now: DateTime<Utc>) -> Vec<&Schedule> {
    schedules
        .iter()
        .filter(|s| s.enabled && s.cadence.fire_between(since, now).is_some())
        .collect()
}

/// Report file path for a run: `<dir>/<name>-<timestamp>.json`.
pub fn report_path(dir: &Path, name: &str, at: DateTime<Utc>) -> PathBuf {
    dir.join(format!("{name}-{}.json", at.format("%Y%m%dT%H%M%SZ")))
}

fn verdict_label(s: Status) -> &'static str {
    match s {
        Status::Upheld => "upheld",
        Status::Refuted => "refuted",
        Status::Aborted => "aborted",
    }
}

/// Runs every schedule due in `(since, now]`, persists reports under
/// `reports_dir` and appends one record per run. An executor error is
/// recorded on its own run and never stops the others. After each
/// successful run, records older than its topology version go stale.
pub fn execute_due<F>(
    schedules: &[Schedule],
    since: DateTime<Utc>,
    now: DateTime<Utc>,
    history: &mut RunHistory,
    reports_dir: &Path,
    mut executor: F,
) -> Result<Vec<RunRecord>, ScheduleError>
where
    F: FnMut(&Schedule) -> Result<ExperimentReport, ExperimentError>,
{
    let mut out = Vec::new();
    for s in due_between(schedules, since, now) {
        let run = match executor(s) {
            Ok(report) => {
                fs::create_dir_all(reports_dir).map_err(|e| ScheduleError::Io(e.to_string()))?;
                let path = report_path(reports_dir, &s.name, now);
                fs::write(&path, report.to_json()).map_err(|e| ScheduleError::Io(e.to_string()))?;
                NewRun {
                    schedule: s.name.clone(),
                    spec: report.snapshot.spec.name.clone(),
                    topology_version: report.snapshot.topology_version,
                    verdict: verdict_label(report.verdict.status).into(),
                    error: None,
                    report_path: Some(path.display().to_string()),
                    timestamp: now,
                }
            }
            Err(e) => NewRun {
                schedule: s.name.clone(),
                spec: s.spec.clone(),
                topology_version: 0,
                verdict: "error".into(),
                error: Some(e.to_string()),
                report_path: None,
                timestamp: now,
            },
        };
        let version = run.topology_version;
        let failed = run.error.is_some();
        let rec = history.append(run)?;
        if !failed {
            history.mark_stale(version)?;
        }
        out.push(rec);
    }
    // Return the records as they stand after any staleness updates.
    let n = history.len();
    Ok(history.records()[n - out.len()..].to_vec())
}

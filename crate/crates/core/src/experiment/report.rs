use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::groups::GroupSizes;
use super::runner::{run_experiment, RunOutput};
use super::spec::{parse_spec_value, ExperimentSpec};
use super::stats::Verdict;
use super::ExperimentError;
use crate::hashing::{Concern, SeedTree};
use crate::metrics::{write_csv, Breach, Deviation, MetricSeries};
use crate::sim::DeathRecord;

/// Everything needed to rerun an experiment without outside files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// The spec with its topology inlined.
    pub spec: ExperimentSpec,
    pub topology_version: u64,
    /// Root seed and every per-concern seed derived from it.
    pub seeds: BTreeMap<String, u64>,
}

impl Snapshot {
    pub fn new(spec: ExperimentSpec, topology_version: u64) -> Self {
        let tree = SeedTree::new(spec.seed);
        let mut seeds = BTreeMap::new();
        seeds.insert("root".to_string(), spec.seed);
        for c in Concern::ALL {
            seeds.insert(c.name().to_string(), tree.seed(c));
        }
        Self {
            spec,
            topology_version,
            seeds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSeries {
    pub control: MetricSeries,
    pub experiment: MetricSeries,
    pub global: MetricSeries,
}

/// Guardrail metric values in one window, in guardrail order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardrailSample {
    pub window: usize,
    pub start_s: f64,
    pub values: Vec<f64>,
    pub violated: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub band: f64,
    pub transient_s: f64,
    pub windows: Vec<Deviation>,
    /// Windows skipped as transients after a fault change.
    pub excluded: Vec<bool>,
}

impl DeviationReport {
    /// Judged windows flagged outside the band.
    pub fn flagged(&self) -> usize {
        self.windows
            .iter()
            .zip(&self.excluded)
            .filter(|(d, &x)| d.flagged && !x)
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub snapshot: Snapshot,
    pub groups: GroupSizes,
    pub series: ReportSeries,
    pub guardrail_timeline: Vec<GuardrailSample>,
    pub breaches: Vec<Breach>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<DeviationReport>,
    pub deaths: Vec<DeathRecord>,
    pub verdict: Verdict,
    /// Wall-clock production time (RFC 3339). Not part of replay checks.
    pub produced_at: String,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Parses a stored report. A report without a snapshot is a config error.
pub fn parse_report(text: &str) -> Result<ExperimentReport, ExperimentError> {
    let v: Value = serde_json::from_str(text).map_err(|e| ExperimentError::config("", e.to_string()))?;
    if v.get("snapshot").map_or(true, Value::is_null) {
        return Err(ExperimentError::MissingSnapshot);
    }
    // Validate the embedded spec first so its errors carry spec paths.
    parse_spec_value(&v["snapshot"]["spec"]).map_err(|e| match e {
        ExperimentError::Config { path, message } => ExperimentError::Config {
            path: format!("snapshot.spec.{path}"),
            message,
        },
        other => other,
    })?;
    serde_path_to_error::deserialize(&v).map_err(|e| {
        let path = e.path().to_string();
        ExperimentError::config(path, e.into_inner().to_string())
    })
}

fn compare_series(name: &str, a: &MetricSeries, b: &MetricSeries) -> Result<(), ExperimentError> {
    let n = a.samples.len().max(b.samples.len());
    for i in 0..n {
        if a.samples.get(i) != b.samples.get(i) {
            return Err(ExperimentError::ReplayMismatch {
                field: format!("series.{name}"),
                window: Some(i),
            });
        }
    }
    if a.metric != b.metric || a.group != b.group || a.window_s != b.window_s {
        return Err(ExperimentError::ReplayMismatch {
            field: format!("series.{name}"),
            window: None,
        });
    }
    Ok(())
}

/// Reruns a stored report from its snapshot and checks that series and
/// verdict match exactly. Returns the regenerated report.
pub fn replay(stored: &ExperimentReport) -> Result<ExperimentReport, ExperimentError> {
    let fresh = run_experiment(&stored.snapshot.spec)?;
    compare_series("control", &stored.series.control, &fresh.series.control)?;
    compare_series("experiment", &stored.series.experiment, &fresh.series.experiment)?;
    compare_series("global", &stored.series.global, &fresh.series.global)?;
    if stored.verdict != fresh.verdict {
        return Err(ExperimentError::ReplayMismatch {
            field: "verdict".into(),
            window: None,
        });
    }
    Ok(fresh)
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Paths of the files written for one run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WrittenFiles {
    pub report: PathBuf,
    pub csv: PathBuf,
}

/// Writes `<stem>.report.json` and `<stem>.metrics.csv` into `dir`.
pub fn write_outputs(output: &RunOutput, dir: &Path, stem: Option<&str>) -> std::io::Result<WrittenFiles> {
    fs::create_dir_all(dir)?;
    let stem = stem.map_or_else(|| file_stem(&output.report.snapshot.spec.name), str::to_string);
    let report = dir.join(format!("{stem}.report.json"));
    let csv = dir.join(format!("{stem}.metrics.csv"));
    fs::write(&report, output.report.to_json())?;
    let mut buf = Vec::new();
    write_csv(&output.sink, &mut buf).map_err(std::io::Error::other)?;
    fs::write(&csv, buf)?;
    Ok(WrittenFiles { report, csv })
}

//! Boundary and fine-grained metrics.
//!
//! The steady-state signal is SPS: successful plus fallback-successful
//! stream starts per second, observed at the system boundary. Per-service
//! metrics (latency, busy fraction, queues) never drive the hypothesis;
//! they feed guardrails that can end an experiment early.

mod baseline;
mod export;
mod guardrail;
mod sink;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baseline::{baseline_deviation, BaselineModel, Deviation};
pub use export::{all_series, write_csv, CSV_HEADER};
pub use guardrail::{guardrail_check, Breach, Direction, Guardrail};
pub use sink::{BoundaryCounters, MetricSink, OutcomeEvent, ServiceWindow, WindowRecord};

/// Default aggregation window.
pub const DEFAULT_WINDOW_S: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("window {0} is still open")]
    OpenWindow(usize),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("reference series does not cover window starting at {0}s")]
    Uncovered(f64),
    #[error("invalid guardrail: {0}")]
    InvalidGuardrail(String),
}

/// Which users a boundary series counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupTag {
    Global,
    Control,
    Experiment,
    Unassigned,
}

impl GroupTag {
    pub const ALL: [GroupTag; 4] = [GroupTag::Global, GroupTag::Control, GroupTag::Experiment, GroupTag::Unassigned];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupTag::Global => "global",
            GroupTag::Control => "control",
            GroupTag::Experiment => "experiment",
            GroupTag::Unassigned => "unassigned",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

/// Metric identifier. Boundary metrics exist per group; service metrics are
/// global and carry the service id (`p99_latency_ms/api`).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricId {
    Sps,
    Arrivals,
    Starts,
    FallbackStarts,
    DegradedStarts,
    Failures,
    InFlight,
    P99LatencyMs(String),
    BusyFraction(String),
    QueueDepth(String),
    MemoryProxy(String),
    FallbackRate(String),
    ErrorRate(String),
}

impl MetricId {
    pub const BOUNDARY: [MetricId; 7] = [
        MetricId::Sps,
        MetricId::Arrivals,
        MetricId::Starts,
        MetricId::FallbackStarts,
        MetricId::DegradedStarts,
        MetricId::Failures,
        MetricId::InFlight,
    ];

    pub fn service_metrics(service: &str) -> [MetricId; 6] {
        let s = || service.to_string();
        [
            MetricId::P99LatencyMs(s()),
            MetricId::BusyFraction(s()),
            MetricId::QueueDepth(s()),
            MetricId::MemoryProxy(s()),
            MetricId::FallbackRate(s()),
            MetricId::ErrorRate(s()),
        ]
    }

    pub fn service(&self) -> Option<&str> {
        match self {
            MetricId::P99LatencyMs(s)
            | MetricId::BusyFraction(s)
            | MetricId::QueueDepth(s)
            | MetricId::MemoryProxy(s)
            | MetricId::FallbackRate(s)
            | MetricId::ErrorRate(s) => Some(s),
            _ => None,
        }
    }

    fn base_name(&self) -> &'static str {
        match self {
            MetricId::Sps => "sps",
            MetricId::Arrivals => "arrivals",
            MetricId::Starts => "starts",
            MetricId::FallbackStarts => "fallback_starts",
            MetricId::DegradedStarts => "degraded_starts",
            MetricId::Failures => "failures",
            MetricId::InFlight => "in_flight",
            MetricId::P99LatencyMs(_) => "p99_latency_ms",
            MetricId::BusyFraction(_) => "busy_fraction",
            MetricId::QueueDepth(_) => "queue_depth",
            MetricId::MemoryProxy(_) => "memory_proxy",
            MetricId::FallbackRate(_) => "fallback_rate",
            MetricId::ErrorRate(_) => "error_rate",
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.service() {
            Some(s) => write!(f, "{}/{}", self.base_name(), s),
            None => f.write_str(self.base_name()),
        }
    }
}

impl FromStr for MetricId {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || MetricsError::UnknownMetric(s.to_string());
        match s.split_once('/') {
            None => MetricId::BOUNDARY
                .iter()
                .find(|m| m.base_name() == s)
                .cloned()
                .ok_or_else(unknown),
            Some((base, svc)) if !svc.is_empty() => {
                let svc = svc.to_string();
                Ok(match base {
                    "p99_latency_ms" => MetricId::P99LatencyMs(svc),
                    "busy_fraction" => MetricId::BusyFraction(svc),
                    "queue_depth" => MetricId::QueueDepth(svc),
                    "memory_proxy" => MetricId::MemoryProxy(svc),
                    "fallback_rate" => MetricId::FallbackRate(svc),
                    "error_rate" => MetricId::ErrorRate(svc),
                    _ => return Err(unknown()),
                })
            }
            Some(_) => Err(unknown()),
        }
    }
}

impl Serialize for MetricId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One value per closed window, windows contiguous from `samples[0].0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric: MetricId,
    pub group: GroupTag,
    pub window_s: f64,
    /// `(window start in seconds, value)`.
    pub samples: Vec<(f64, f64)>,
}

impl MetricSeries {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.1)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.values().sum::<f64>() / self.samples.len() as f64
    }

    /// Every value multiplied by `k` (per-capita normalisation).
    pub fn scaled(&self, k: f64) -> MetricSeries {
        MetricSeries {
            samples: self.samples.iter().map(|&(t, v)| (t, v * k)).collect(),
            ..self.clone()
        }
    }

    /// Keeps the first `n` windows.
    pub fn truncated(&self, n: usize) -> MetricSeries {
        MetricSeries {
            samples: self.samples.iter().take(n).copied().collect(),
            ..self.clone()
        }
    }
}

/// SPS of a closed window of an SPS series.
pub fn sps(series: &MetricSeries, window: usize) -> Result<f64, MetricsError> {
    series.samples.get(window).map(|s| s.1).ok_or(MetricsError::OpenWindow(window))
}

use serde::{Deserialize, Serialize};

use super::{MetricSeries, MetricsError};

/// Reference trend plus tolerance band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub reference: MetricSeries,
    /// Relative deviation allowed per window, e.g. `0.02`.
    pub band: f64,
}

impl BaselineModel {
    pub fn new(reference: MetricSeries, band: f64) -> Self {
        Self { reference, band }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub window_start_s: f64,
    pub current: f64,
    pub reference: f64,
    /// `(current - reference) / reference`; `None` when the reference is
    /// zero and the current value is not (an infinite deviation).
    pub deviation: Option<f64>,
    pub flagged: bool,
}

impl Deviation {
    pub fn magnitude(&self) -> f64 {
        self.deviation.map_or(f64::INFINITY, f64::abs)
    }
}

/// Per-window relative deviation of `current` from the model's reference.
/// Windows are matched by start time.
pub fn baseline_deviation(current: &MetricSeries, model: &BaselineModel) -> Result<Vec<Deviation>, MetricsError> {
    current
        .samples
        .iter()
        .enumerate()
        .map(|(i, &(start, cur))| {
            let reference = match model.reference.samples.get(i) {
                Some(&(s, v)) if s == start => v,
                _ => model
                    .reference
                    .samples
                    .iter()
                    .find(|s| s.0 == start)
                    .map(|s| s.1)
                    .ok_or(MetricsError::Uncovered(start))?,
            };
            let deviation = if reference == 0.0 {
                if cur == 0.0 {
                    Some(0.0)
                } else {
                    None
                }
            } else {
                Some((cur - reference) / reference)
            };
            let flagged = deviation.map_or(true, |d| d.abs() > model.band);
            Ok(Deviation {
                window_start_s: start,
                current: cur,
                reference,
                deviation,
                flagged,
            })
        })
        .collect()
}

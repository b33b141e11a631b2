use serde::{Deserialize, Serialize};

use super::{GroupTag, MetricId, MetricSink, MetricsError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Violated when the value is strictly above the threshold.
    #[default]
    Above,
    /// Violated when the value is strictly below the threshold.
    Below,
}

/// Threshold on a fine-grained metric that can end an experiment early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guardrail {
    pub metric: MetricId,
    pub threshold: f64,
    #[serde(default)]
    pub direction: Direction,
    /// Consecutive violating windows needed to trip.
    #[serde(default = "one")]
    pub windows: u32,
}

fn one() -> u32 {
    1
}

impl Guardrail {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !self.threshold.is_finite() {
            return Err(MetricsError::InvalidGuardrail(format!("{}: threshold must be finite", self.metric)));
        }
        if self.windows == 0 {
            return Err(MetricsError::InvalidGuardrail(format!("{}: windows must be at least 1", self.metric)));
        }
        Ok(())
    }

    fn violated(&self, v: f64) -> bool {
        match self.direction {
            Direction::Above => v > self.threshold,
            Direction::Below => v < self.threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breach {
    pub metric: MetricId,
    pub service: Option<String>,
    pub threshold: f64,
    pub direction: Direction,
    /// First window of the violating streak.
    pub first_window: usize,
    pub first_window_start_s: f64,
    /// Window at which the streak reached the required length.
    pub tripped_window: usize,
    /// Metric value in the tripping window.
    pub value: f64,
}

/// Breaches over the sink's closed windows, at most one per guardrail, in
/// guardrail order.
pub fn guardrail_check(guardrails: &[Guardrail], sink: &MetricSink) -> Result<Vec<Breach>, MetricsError> {
    let mut out = Vec::new();
    for g in guardrails {
        g.validate()?;
        sink.check_metric(&g.metric)?;
        let series = sink.series(&g.metric, GroupTag::Global)?;
        let mut streak = 0usize;
        for (i, &(_, v)) in series.samples.iter().enumerate() {
            if !g.violated(v) {
                streak = 0;
                continue;
            }
            streak += 1;
            if streak >= g.windows as usize {
                let first = i + 1 - streak;
                out.push(Breach {
                    metric: g.metric.clone(),
                    service: g.metric.service().map(str::to_string),
                    threshold: g.threshold,
                    direction: g.direction,
                    first_window: first,
                    first_window_start_s: series.samples[first].0,
                    tripped_window: i,
                    value: v,
                });
                break;
            }
        }
    }
    Ok(out)
}

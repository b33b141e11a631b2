use serde::{Deserialize, Serialize};

use super::{GroupTag, MetricId, MetricSeries, MetricsError};
use crate::experiment::GroupAssignment;
use crate::sim::{Outcome, SimTime};

/// A finished stream-start attempt as seen at the boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutcomeEvent {
    pub time: SimTime,
    pub user: u64,
    pub outcome: Outcome,
    pub latency_ms: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryCounters {
    pub arrivals: u64,
    pub starts: u64,
    pub fallback_starts: u64,
    pub degraded_starts: u64,
    pub failures: u64,
    /// Attempts still in flight when the window closed.
    pub in_flight: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceWindow {
    pub calls: u64,
    pub failures: u64,
    /// Failed calls masked by the service's fallback.
    pub fallbacks: u64,
    /// Error responses served straight from this service's cache.
    pub cached_error_serves: u64,
    pub p99_latency_ms: f64,
    pub busy_fraction: f64,
    /// Total queued calls across instances at window close.
    pub queue_depth: u64,
    /// Largest single-instance queue at window close.
    pub memory_proxy: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub start: SimTime,
    /// Indexed by [`GroupTag`] order: global, control, experiment, unassigned.
    pub boundary: [BoundaryCounters; 4],
    pub services: Vec<ServiceWindow>,
}

#[derive(Clone, Debug, Default)]
struct ServiceAccum {
    calls: u64,
    failures: u64,
    fallbacks: u64,
    cached_error_serves: u64,
    latencies: Vec<f64>,
    busy_us: u64,
    carry_us: u64,
}

/// Per-run metric sink. Written by the simulation loop only; the closed
/// windows are immutable once pushed.
#[derive(Clone, Debug)]
pub struct MetricSink {
    window: SimTime,
    services: Vec<String>,
    instances: Vec<u32>,
    assignment: Option<GroupAssignment>,
    open_start: SimTime,
    boundary: [BoundaryCounters; 4],
    in_flight: [u64; 4],
    accum: Vec<ServiceAccum>,
    closed: Vec<WindowRecord>,
}

impl MetricSink {
    /// `instances[i]` is the total instance count of service `i` across
    /// regions, used as the busy-fraction denominator.
    pub fn new(window: SimTime, services: Vec<String>, instances: Vec<u32>) -> Self {
        assert!(window.micros() > 0, "window length must be positive");
        assert_eq!(services.len(), instances.len());
        let n = services.len();
        Self {
            window,
            services,
            instances,
            assignment: None,
            open_start: SimTime::ZERO,
            boundary: Default::default(),
            in_flight: [0; 4],
            accum: vec![ServiceAccum::default(); n],
            closed: Vec::new(),
        }
    }

    pub fn set_assignment(&mut self, assignment: Option<GroupAssignment>) {
        self.assignment = assignment;
    }

    pub fn assignment(&self) -> Option<&GroupAssignment> {
        self.assignment.as_ref()
    }

    pub fn window(&self) -> SimTime {
        self.window
    }

    pub fn window_s(&self) -> f64 {
        self.window.as_secs_f64()
    }

    pub fn open_window_end(&self) -> SimTime {
        self.open_start.plus(self.window.micros())
    }

    pub fn services(&self) -> &[String] {
        &self.services
    }

    pub fn windows(&self) -> &[WindowRecord] {
        &self.closed
    }

    pub fn group_of(&self, user: u64) -> GroupTag {
        self.assignment.as_ref().map_or(GroupTag::Unassigned, |a| a.group_of(user))
    }

    pub fn record_arrival(&mut self, user: u64) {
        let g = self.group_of(user).index();
        for i in [0, g] {
            self.boundary[i].arrivals += 1;
            self.in_flight[i] += 1;
        }
    }

    /// Boundary outcome of a stream-start attempt.
    pub fn record(&mut self, event: &OutcomeEvent) {
        let g = self.group_of(event.user).index();
        for i in [0, g] {
            let c = &mut self.boundary[i];
            match event.outcome {
                Outcome::Success => c.starts += 1,
                Outcome::Fallback { degraded } => {
                    c.fallback_starts += 1;
                    if degraded {
                        c.degraded_starts += 1;
                    }
                }
                Outcome::Failure { .. } => c.failures += 1,
            }
            self.in_flight[i] -= 1;
        }
    }

    pub fn record_call(&mut self, service: usize, latency_ms: f64, failed: bool) {
        let a = &mut self.accum[service];
        a.calls += 1;
        if failed {
            a.failures += 1;
        }
        a.latencies.push(latency_ms);
    }

    pub fn record_fallback(&mut self, service: usize) {
        self.accum[service].fallbacks += 1;
    }

    pub fn record_cached_error(&mut self, service: usize) {
        self.accum[service].cached_error_serves += 1;
    }

    /// Busy time starting at `now`; the part past the open window carries
    /// into the following ones.
    pub fn record_busy(&mut self, service: usize, now: SimTime, busy_us: u64) {
        let room = self.open_window_end().since(now);
        let a = &mut self.accum[service];
        let here = busy_us.min(room);
        a.busy_us += here;
        a.carry_us += busy_us - here;
    }

    /// Seals the open window. `gauges[i]` is `(queue_depth, memory_proxy)`
    /// for service `i` at the close instant.
    pub fn close_window(&mut self, gauges: &[(u64, u64)]) {
        let window_us = self.window.micros();
        let mut boundary = self.boundary;
        for (b, f) in boundary.iter_mut().zip(self.in_flight) {
            b.in_flight = f;
        }
        let services = self
            .accum
            .iter_mut()
            .zip(&self.instances)
            .zip(gauges)
            .map(|((a, &inst), &(queue_depth, memory_proxy))| {
                let w = ServiceWindow {
                    calls: a.calls,
                    failures: a.failures,
                    fallbacks: a.fallbacks,
                    cached_error_serves: a.cached_error_serves,
                    p99_latency_ms: p99(&mut a.latencies),
                    busy_fraction: a.busy_us as f64 / (window_us as f64 * f64::from(inst.max(1))),
                    queue_depth,
                    memory_proxy,
                };
                let carry = a.carry_us;
                *a = ServiceAccum {
                    latencies: std::mem::take(&mut a.latencies),
                    ..Default::default()
                };
                a.latencies.clear();
                a.busy_us = carry.min(window_us * u64::from(inst.max(1)));
                a.carry_us = carry - a.busy_us;
                w
            })
            .collect();
        self.closed.push(WindowRecord {
            start: self.open_start,
            boundary,
            services,
        });
        self.boundary = Default::default();
        self.open_start = self.open_start.plus(window_us);
    }

    /// Extracts one metric as a series over the closed windows.
    pub fn series(&self, metric: &MetricId, group: GroupTag) -> Result<MetricSeries, MetricsError> {
        let window_s = self.window_s();
        let value: Box<dyn Fn(&WindowRecord) -> f64> = match metric.service() {
            None => {
                let g = group.index();
                let m = metric.clone();
                Box::new(move |w: &WindowRecord| {
                    let c = &w.boundary[g];
                    match m {
                        MetricId::Sps => (c.starts + c.fallback_starts) as f64 / window_s,
                        MetricId::Arrivals => c.arrivals as f64,
                        MetricId::Starts => c.starts as f64,
                        MetricId::FallbackStarts => c.fallback_starts as f64,
                        MetricId::DegradedStarts => c.degraded_starts as f64,
                        MetricId::Failures => c.failures as f64,
                        MetricId::InFlight => c.in_flight as f64,
                        _ => unreachable!("service metric without service"),
                    }
                })
            }
            Some(svc) => {
                if group != GroupTag::Global {
                    return Err(MetricsError::UnknownMetric(format!("{metric}@{}", group.as_str())));
                }
                let i = self
                    .services
                    .iter()
                    .position(|s| s == svc)
                    .ok_or_else(|| MetricsError::UnknownMetric(metric.to_string()))?;
                let m = metric.clone();
                Box::new(move |w: &WindowRecord| {
                    let s = &w.services[i];
                    let ratio = |n: u64| if s.calls == 0 { 0.0 } else { n as f64 / s.calls as f64 };
                    match m {
                        MetricId::P99LatencyMs(_) => s.p99_latency_ms,
                        MetricId::BusyFraction(_) => s.busy_fraction,
                        MetricId::QueueDepth(_) => s.queue_depth as f64,
                        MetricId::MemoryProxy(_) => s.memory_proxy as f64,
                        MetricId::FallbackRate(_) => ratio(s.fallbacks),
                        MetricId::ErrorRate(_) => ratio(s.failures),
                        _ => unreachable!("boundary metric with service"),
                    }
                })
            }
        };
        Ok(MetricSeries {
            metric: metric.clone(),
            group,
            window_s,
            samples: self.closed.iter().map(|w| (w.start.as_secs_f64(), value(w))).collect(),
        })
    }

    /// Checks that a metric id resolves against this sink.
    pub fn check_metric(&self, metric: &MetricId) -> Result<(), MetricsError> {
        match metric.service() {
            Some(s) if !self.services.iter().any(|x| x == s) => Err(MetricsError::UnknownMetric(metric.to_string())),
            _ => Ok(()),
        }
    }
}

/// Exact nearest-rank 99th percentile; 0 for an empty window.
fn p99(samples: &mut [f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let rank = ((samples.len() as f64) * 0.99).ceil() as usize;
    let idx = rank.clamp(1, samples.len()) - 1;
    let (_, v, _) = samples.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::FailureReason;

    fn sink() -> MetricSink {
        MetricSink::new(SimTime::from_secs(60), vec!["api".into()], vec![2])
    }

    fn ev(user: u64, outcome: Outcome) -> OutcomeEvent {
        OutcomeEvent {
            time: SimTime::from_secs(1),
            user,
            outcome,
            latency_ms: 1.0,
        }
    }

    #[test]
    fn counters_follow_outcomes() {
        let mut s = sink();
        for u in 0..3 {
            s.record_arrival(u);
        }
        s.record(&ev(0, Outcome::Success));
        s.record(&ev(1, Outcome::Fallback { degraded: true }));
        s.record(&ev(2, Outcome::failure(FailureReason::Injected)));
        s.close_window(&[(0, 0)]);
        let c = s.windows()[0].boundary[0];
        assert_eq!((c.arrivals, c.starts, c.fallback_starts, c.degraded_starts, c.failures), (3, 1, 1, 1, 1));
        assert_eq!(s.series(&MetricId::Sps, GroupTag::Global).unwrap().samples, vec![(0.0, 2.0 / 60.0)]);
    }

    #[test]
    fn six_hundred_starts_in_a_minute_is_ten_per_second() {
        let mut s = sink();
        for u in 0..600 {
            s.record_arrival(u);
            s.record(&ev(u, Outcome::Success));
        }
        s.close_window(&[(0, 0)]);
        s.close_window(&[(0, 0)]);
        let sps = s.series(&MetricId::Sps, GroupTag::Global).unwrap();
        assert_eq!(sps.samples, vec![(0.0, 10.0), (60.0, 0.0)]);
    }

    #[test]
    fn p99_is_nearest_rank() {
        let mut v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(p99(&mut v), 99.0);
        let mut v: Vec<f64> = (1..=1000).rev().map(f64::from).collect();
        assert_eq!(p99(&mut v), 990.0);
        assert_eq!(p99(&mut [7.0]), 7.0);
        assert_eq!(p99(&mut []), 0.0);
    }

    #[test]
    fn busy_time_spills_into_next_window() {
        let mut s = sink();
        // 2 instances * 60s window; 30s of busy time starting 10s before close.
        s.record_busy(0, SimTime::from_secs(50), 30_000_000);
        s.close_window(&[(0, 0)]);
        s.close_window(&[(0, 0)]);
        let b = s.series(&MetricId::BusyFraction("api".into()), GroupTag::Global).unwrap();
        assert_eq!(b.samples, vec![(0.0, 10.0 / 120.0), (60.0, 20.0 / 120.0)]);
    }

    #[test]
    fn service_metrics_need_known_service_and_global_group() {
        let s = sink();
        assert!(s.series(&MetricId::ErrorRate("nope".into()), GroupTag::Global).is_err());
        assert!(s.series(&MetricId::ErrorRate("api".into()), GroupTag::Control).is_err());
        assert!(s.check_metric(&MetricId::QueueDepth("api".into())).is_ok());
    }
}

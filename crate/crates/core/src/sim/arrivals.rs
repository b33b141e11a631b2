//! Diurnal user-traffic generator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::time::SimTime;
use super::topology::TrafficSpec;

pub const DAY_S: f64 = 86_400.0;

/// A stream-start attempt entering the system boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arrival {
    pub time: SimTime,
    pub user: u64,
    pub key: u32,
}

/// Instantaneous arrival rate (per second) at `t_s` seconds.
pub fn rate_at(traffic: &TrafficSpec, t_s: f64) -> f64 {
    traffic.base_rate
        * (1.0 + traffic.amplitude * (std::f64::consts::TAU * (t_s - traffic.phase_s) / DAY_S).sin())
}

/// Closed-form expected number of arrivals in `[t0_s, t1_s)`.
pub fn expected_arrivals(traffic: &TrafficSpec, t0_s: f64, t1_s: f64) -> f64 {
    let w = std::f64::consts::TAU / DAY_S;
    let cos = |t: f64| (w * (t - traffic.phase_s)).cos();
    traffic.base_rate * ((t1_s - t0_s) - traffic.amplitude / w * (cos(t1_s) - cos(t0_s)))
}

/// Inhomogeneous Poisson process sampled by thinning a homogeneous process
/// at the peak rate. Draws only from its own generator.
#[derive(Clone, Debug)]
pub struct ArrivalProcess {
    traffic: TrafficSpec,
    rng: ChaCha8Rng,
    peak: f64,
    /// Next candidate time in seconds, not yet accepted or rejected.
    candidate_s: f64,
}

impl ArrivalProcess {
    pub fn new(traffic: TrafficSpec, mut rng: ChaCha8Rng) -> Self {
        let peak = traffic.base_rate * (1.0 + traffic.amplitude);
        let candidate_s = exp_gap(&mut rng, peak);
        Self {
            traffic,
            rng,
            peak,
            candidate_s,
        }
    }

    /// Appends every arrival in `[t0, t1)` to `out`. Intervals must be
    /// requested in increasing, contiguous order.
    pub fn fill(&mut self, t0: SimTime, t1: SimTime, out: &mut Vec<Arrival>) {
        debug_assert!(t1 > t0);
        let end_s = t1.as_secs_f64();
        while self.candidate_s < end_s {
            let t = self.candidate_s;
            self.candidate_s += exp_gap(&mut self.rng, self.peak);
            let accept: f64 = self.rng.gen();
            if accept * self.peak >= rate_at(&self.traffic, t) {
                continue;
            }
            let user = self.rng.gen_range(0..self.traffic.population);
            let key = self.rng.gen_range(0..self.traffic.keys);
            let time = SimTime::from_secs_f64(t);
            if time < t0 {
                continue;
            }
            out.push(Arrival { time, user, key });
        }
    }

    /// Arrivals in `[t0, t1)`.
    pub fn generate(&mut self, t0: SimTime, t1: SimTime) -> Vec<Arrival> {
        let mut out = Vec::new();
        self.fill(t0, t1, &mut out);
        out
    }
}

fn exp_gap(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / rate
}

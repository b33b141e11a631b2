//! Hypothesis evaluation: relative effect plus a paired permutation test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Breach, MetricSeries};

/// Fewest windows a permutation test is run on.
pub const MIN_WINDOWS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("control and experiment series do not share a window grid")]
    MismatchedWindows,
    #[error("need at least {MIN_WINDOWS} windows, got {0}")]
    TooFewWindows(usize),
    #[error("control mean is zero: the control group itself is broken")]
    IndeterminateControl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Upheld,
    Refuted,
    Aborted,
}

/// How the verdict was reached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Experiment group against control group.
    ControlGroup,
    /// Whole system against a paired no-fault reference run.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    /// Window after which the experiment stopped.
    pub window: usize,
    pub time_s: f64,
    pub breaches: Vec<Breach>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: Status,
    pub mode: Mode,
    /// Relative difference of means, `(experiment - control) / control`.
    pub effect: Option<f64>,
    pub p_value: Option<f64>,
    pub windows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort: Option<AbortRecord>,
}

/// Relative difference of means, or `None` when the control mean is zero.
pub fn relative_effect(control: &[f64], experiment: &[f64]) -> Option<f64> {
    let mc = mean(control);
    (mc != 0.0).then(|| (mean(experiment) - mc) / mc)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Two-sided paired permutation test of the relative effect: each shuffle
/// swaps the control and experiment labels of every window independently
/// with probability 1/2. Permuted effects are normalised by the observed
/// control mean, so they are on the same scale as the observed effect.
/// `p = (#{|perm| >= |obs|} + 1) / (P + 1)`.
pub fn permutation_p_value(control: &[f64], experiment: &[f64], permutations: u32, seed: u64) -> f64 {
    let diffs: Vec<f64> = experiment.iter().zip(control).map(|(e, c)| e - c).collect();
    let obs = diffs.iter().sum::<f64>().abs();
    let tol = 1e-9 * diffs.iter().map(|d| d.abs()).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u32;
    for _ in 0..permutations {
        let perm: f64 = diffs.iter().map(|&d| if rng.gen::<bool>() { -d } else { d }).sum();
        if perm.abs() >= obs - tol {
            hits += 1;
        }
    }
    f64::from(hits + 1) / f64::from(permutations + 1)
}

/// Upheld unless the difference is both statistically detectable
/// (`p <= alpha`) and practically relevant (`|effect| > delta`).
pub fn evaluate_hypothesis(
    control: &MetricSeries,
    experiment: &MetricSeries,
    delta: f64,
    alpha: f64,
    permutations: u32,
    seed: u64,
) -> Result<Verdict, StatsError> {
    if control.len() != experiment.len()
        || control.samples.iter().zip(&experiment.samples).any(|(a, b)| a.0 != b.0)
    {
        return Err(StatsError::MismatchedWindows);
    }
    if control.len() < MIN_WINDOWS {
        return Err(StatsError::TooFewWindows(control.len()));
    }
    let c: Vec<f64> = control.values().collect();
    let e: Vec<f64> = experiment.values().collect();
    let effect = relative_effect(&c, &e).ok_or(StatsError::IndeterminateControl)?;
    let p = permutation_p_value(&c, &e, permutations, seed);
    let status = if p <= alpha && effect.abs() > delta {
        Status::Refuted
    } else {
        Status::Upheld
    };
    Ok(Verdict {
        status,
        mode: Mode::ControlGroup,
        effect: Some(effect),
        p_value: Some(p),
        windows: c.len(),
        abort: None,
    })
}

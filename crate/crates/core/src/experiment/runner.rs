use std::path::PathBuf;

use rayon::prelude::*;

use super::groups::{assign_groups, GroupAssignment};
use super::report::{DeviationReport, ExperimentReport, GuardrailSample, ReportSeries, Snapshot};
use super::spec::{validate_spec, AbortPolicy, ExperimentSpec, Resolved};
use super::stats::{permutation_p_value, relative_effect, AbortRecord, Mode, Status, Verdict, MIN_WINDOWS};
use super::ExperimentError;
use crate::hashing::{Concern, SeedTree};
use crate::metrics::{
    baseline_deviation, guardrail_check, BaselineModel, Breach, GroupTag, MetricSeries, MetricSink,
};
use crate::sim::{SimTime, Trace, World, WorldOptions};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Keep the simulator trace (fault firings, calls, outcomes).
    pub trace: bool,
    /// Directory relative topology paths are resolved against.
    pub base_dir: Option<PathBuf>,
}

/// A finished run: the report plus the raw material behind it.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: ExperimentReport,
    pub sink: MetricSink,
    pub trace: Option<Trace>,
    /// Metrics of the paired no-fault run, in baseline mode.
    pub reference: Option<MetricSink>,
}

/// Abort decision for the breaches seen so far.
pub fn should_abort(breaches: &[Breach], policy: AbortPolicy) -> bool {
    policy == AbortPolicy::OnBreach && !breaches.is_empty()
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport, ExperimentError> {
    run_experiment_with(spec, &RunOptions::default()).map(|o| o.report)
}

pub fn run_experiment_with(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunOutput, ExperimentError> {
    let resolved = validate_spec(spec, opts.base_dir.as_deref())?;
    run_resolved(&resolved, opts)
}

/// Runs independent experiments in parallel.
pub fn run_batch(specs: &[ExperimentSpec]) -> Vec<Result<ExperimentReport, ExperimentError>> {
    specs.par_iter().map(run_experiment).collect()
}

fn new_world(r: &Resolved, with_faults: bool, trace: bool, groups: &GroupAssignment) -> Result<World, ExperimentError> {
    let faults = if with_faults { r.spec.faults.as_slice() } else { &[] };
    let mut w = World::new(
        r.topology.clone(),
        r.spec.seed,
        faults,
        WorldOptions {
            window: SimTime::from_secs_f64(r.spec.window),
            trace,
        },
    )
    .map_err(|e| ExperimentError::config("faults", e.to_string()))?;
    w.sink_mut().set_assignment(Some(groups.clone()));
    Ok(w)
}

pub fn run_resolved(r: &Resolved, opts: &RunOptions) -> Result<RunOutput, ExperimentError> {
    let spec = &r.spec;
    let groups = assign_groups(r.topology.traffic().population, spec.group.fraction, &spec.group.salt)?;
    let window = SimTime::from_secs_f64(spec.window);

    let reference = if r.mode == Mode::Baseline {
        let mut w = new_world(r, false, false, &groups)?;
        w.run_until(SimTime(window.micros() * r.windows as u64));
        Some(w.into_sink())
    } else {
        None
    };

    let mut world = new_world(r, true, opts.trace, &groups)?;
    let mut breaches: Vec<Breach> = Vec::new();
    let mut abort = None;
    for k in 0..r.windows {
        world.run_until(SimTime(window.micros() * (k as u64 + 1)));
        if spec.guardrails.is_empty() {
            continue;
        }
        for b in guardrail_check(&spec.guardrails, world.sink())? {
            if !breaches.iter().any(|x| x.metric == b.metric && x.threshold == b.threshold) {
                breaches.push(b);
            }
        }
        if should_abort(&breaches, spec.abort_policy) {
            world.deactivate_all_faults();
            abort = Some(AbortRecord {
                window: k,
                time_s: world.clock().as_secs_f64(),
                breaches: breaches.clone(),
            });
            break;
        }
    }

    let sink = world.sink();
    let n = sink.windows().len();
    let metric = &spec.metric;
    let global = sink.series(metric, GroupTag::Global)?;
    let control = sink.series(metric, GroupTag::Control)?;
    let experiment = sink.series(metric, GroupTag::Experiment)?;

    let timeline = sink
        .windows()
        .iter()
        .enumerate()
        .map(|(i, w)| -> Result<GuardrailSample, ExperimentError> {
            let mut values = Vec::new();
            let mut violated = Vec::new();
            for g in &spec.guardrails {
                let v = sink.series(&g.metric, GroupTag::Global)?.samples[i].1;
                values.push(v);
                violated.push(match g.direction {
                    crate::metrics::Direction::Above => v > g.threshold,
                    crate::metrics::Direction::Below => v < g.threshold,
                });
            }
            Ok(GuardrailSample {
                window: i,
                start_s: w.start.as_secs_f64(),
                values,
                violated,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let perm_seed = SeedTree::new(spec.seed).seed(Concern::Permutation);
    let (verdict, deviation) = match r.mode {
        Mode::ControlGroup => {
            let c = per_capita(&control, groups.sizes.control);
            let e = per_capita(&experiment, groups.sizes.experiment);
            let (cv, ev): (Vec<f64>, Vec<f64>) = (c.values().collect(), e.values().collect());
            let effect = relative_effect(&cv, &ev);
            let verdict = if let Some(abort) = abort {
                let p_value = (n >= MIN_WINDOWS && effect.is_some())
                    .then(|| permutation_p_value(&cv, &ev, spec.permutations, perm_seed));
                Verdict {
                    status: Status::Aborted,
                    mode: Mode::ControlGroup,
                    effect,
                    p_value,
                    windows: n,
                    abort: Some(abort),
                }
            } else {
                super::stats::evaluate_hypothesis(&c, &e, spec.delta, spec.alpha, spec.permutations, perm_seed)?
            };
            (verdict, None)
        }
        Mode::Baseline => {
            let reference = reference.as_ref().expect("baseline mode has a reference run");
            let ref_series = reference.series(metric, GroupTag::Global)?.truncated(n);
            let model = BaselineModel::new(ref_series.clone(), spec.baseline.band);
            let devs = baseline_deviation(&global, &model)?;
            let excluded = transient_mask(r, &global);
            let report = DeviationReport {
                band: spec.baseline.band,
                transient_s: spec.baseline.transient_s,
                windows: devs,
                excluded,
            };
            let judged: Vec<usize> = (0..n).filter(|&i| !report.excluded[i]).collect();
            let cur: Vec<f64> = judged.iter().map(|&i| global.samples[i].1).collect();
            let refv: Vec<f64> = judged.iter().map(|&i| ref_series.samples[i].1).collect();
            let effect = relative_effect(&refv, &cur);
            let status = if abort.is_some() {
                Status::Aborted
            } else if report.flagged() > 0 {
                Status::Refuted
            } else {
                Status::Upheld
            };
            let verdict = Verdict {
                status,
                mode: Mode::Baseline,
                effect,
                p_value: None,
                windows: judged.len(),
                abort,
            };
            (verdict, Some(report))
        }
    };

    let report = ExperimentReport {
        snapshot: Snapshot::new(r.snapshot(), r.topology.version()),
        groups: groups.sizes,
        series: ReportSeries {
            control,
            experiment,
            global,
        },
        guardrail_timeline: timeline,
        breaches,
        deviation,
        deaths: world.deaths().to_vec(),
        verdict,
        produced_at: chrono::Utc::now().to_rfc3339(),
    };
    let trace = world.trace().cloned();
    Ok(RunOutput {
        report,
        sink: world.into_sink(),
        trace,
        reference,
    })
}

fn per_capita(series: &MetricSeries, size: u64) -> MetricSeries {
    if size == 0 {
        series.scaled(0.0)
    } else {
        series.scaled(1.0 / size as f64)
    }
}

/// Windows overlapping `[t, t + transient)` for any fault activation or
/// revert time `t`.
fn transient_mask(r: &Resolved, series: &MetricSeries) -> Vec<bool> {
    let transient = r.spec.baseline.transient_s;
    let mut changes: Vec<f64> = Vec::new();
    for f in &r.spec.faults {
        let start = f.window.start_ms as f64 / 1e3;
        changes.push(start);
        changes.push(start + f.window.duration_ms as f64 / 1e3);
    }
    series
        .samples
        .iter()
        .map(|&(s, _)| {
            let e = s + series.window_s;
            changes.iter().any(|&t| s < t + transient && t < e)
        })
        .collect()
}

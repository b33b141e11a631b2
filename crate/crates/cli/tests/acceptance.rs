//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use chaoslab_core::experiment::{
    assign_groups, parse_spec, parse_spec_value, run_batch, run_experiment_with, ExperimentSpec, RunOptions, RunOutput,
    Status,
};
use chaoslab_core::hashing::mix64;
use chaoslab_core::metrics::{GroupTag, MetricId};
use chaoslab_core::scheduler::Cadence;
use chrono::{DateTime, Datelike, Duration, TimeZone, Timelike, Utc, Weekday};
use serde_json::{json, Value};

type Check = Result<String, String>;

fn specs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("specs")
}

fn load(name: &str) -> ExperimentSpec {
    parse_spec(&fs::read_to_string(specs_dir().join(name)).unwrap()).unwrap()
}

fn with_topology(mut spec: ExperimentSpec, base: &str, patch: Value) -> ExperimentSpec {
    spec.topology = json!({"base": base, "patch": patch});
    spec
}

fn run(spec: &ExperimentSpec, trace: bool) -> RunOutput {
    run_experiment_with(spec, &RunOptions { trace, base_dir: None }).unwrap()
}

fn seeded(spec: &ExperimentSpec, seeds: std::ops::Range<u64>) -> Vec<ExperimentSpec> {
    seeds
        .map(|s| {
            let mut x = spec.clone();
            x.seed = s;
            x
        })
        .collect()
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn chaoslab() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chaoslab"));
    c.env_remove("CHAOSLAB_OUT");
    c
}

fn strip_wall_clock(report: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("produced_at");
    v
}

fn determinism_and_replay() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let mut names: Vec<String> = fs::read_dir(specs_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json") && n != "schedules.json")
        .collect();
    names.sort();
    let mut bad = Vec::new();
    for name in &names {
        let stem = name.trim_end_matches(".json");
        let out = |tag: &str| {
            let dir = tmp.path().join(format!("{stem}-{tag}"));
            let o = chaoslab().arg("run").arg(specs_dir().join(name)).arg("--out").arg(&dir).output().unwrap();
            (dir, o.status.code(), o.stdout)
        };
        let (a, code_a, stdout_a) = out("a");
        let (b, code_b, stdout_b) = out("b");
        let csv = |d: &Path| fs::read(d.join(format!("{stem}.metrics.csv"))).unwrap();
        let report = |d: &Path| strip_wall_clock(&d.join(format!("{stem}.report.json")));
        if code_a != code_b || csv(&a) != csv(&b) || report(&a) != report(&b) {
            bad.push(format!("{stem}: reruns differ"));
            continue;
        }
        let summary = |s: &[u8]| -> Value { serde_json::from_slice(s).unwrap() };
        let (mut sa, mut sb) = (summary(&stdout_a), summary(&stdout_b));
        for s in [&mut sa, &mut sb] {
            s.as_object_mut().unwrap().retain(|k, _| k != "report" && k != "csv");
        }
        if sa != sb {
            bad.push(format!("{stem}: summaries differ"));
        }
        let r = chaoslab().arg("replay").arg(a.join(format!("{stem}.report.json"))).output().unwrap();
        if r.status.code() != Some(0) {
            bad.push(format!("{stem}: replay exit {:?}", r.status.code()));
        }
    }
    let detail = if bad.is_empty() {
        format!("{} specs, byte-identical reruns and replays", names.len())
    } else {
        bad.join("; ")
    };
    ensure(bad.is_empty(), detail)
}

fn bookmark_fallback() -> Check {
    let reports = run_batch(&seeded(&load("bookmark-fallback.json"), 0..100));
    let mut good = 0;
    let mut worst: f64 = 0.0;
    for r in reports {
        let v = r.map_err(|e| e.to_string())?.verdict;
        let e = v.effect.unwrap().abs();
        worst = worst.max(e);
        if v.status == Status::Upheld && e <= 0.01 {
            good += 1;
        }
    }
    ensure(good >= 95, format!("{good}/100 upheld with |effect| <= 0.01 (max |effect| {worst:.4})"))
}

fn criticality() -> Check {
    let reports = run_batch(&seeded(&load("critical-no-fallback.json"), 0..100));
    let mut good = 0;
    let (mut max_p, mut max_effect) = (0.0f64, f64::NEG_INFINITY);
    for r in reports {
        let v = r.map_err(|e| e.to_string())?.verdict;
        let (p, e) = (v.p_value.unwrap(), v.effect.unwrap());
        max_p = max_p.max(p);
        max_effect = max_effect.max(e);
        if v.status == Status::Refuted && p <= 0.01 && e <= -0.9 {
            good += 1;
        }
    }
    ensure(good == 100, format!("{good}/100 refuted (max p {max_p:.4}, max effect {max_effect:.4})"))
}

fn null_calibration() -> Check {
    let spec = parse_spec_value(&json!({
        "name": "a-a",
        "topology": "three-region",
        "group": {"fraction": 0.05, "salt": "a-a"},
        "faults": [],
        "alpha": 0.05,
        "duration": 3600,
        "window": 10
    }))
    .unwrap();
    let reports = run_batch(&seeded(&spec, 0..1000));
    let mut refuted = 0;
    for r in reports {
        if r.map_err(|e| e.to_string())?.verdict.status == Status::Refuted {
            refuted += 1;
        }
    }
    let rate = refuted as f64 / 1000.0;
    ensure((0.03..=0.07).contains(&rate), format!("refutation rate {rate:.3} over 1000 seeds"))
}

fn mean_busy(out: &RunOutput, windows: usize) -> f64 {
    let s = out.sink.series(&MetricId::BusyFraction("api".into()), GroupTag::Global).unwrap();
    s.values().take(windows).sum::<f64>() / windows as f64
}

fn chaos_kong() -> Check {
    let spec = load("kong.json");
    let mut lines = Vec::new();
    let mut ok = true;
    for (rate, expect_flag) in [(270, false), (405, true)] {
        for seed in 1..=3 {
            let mut s = with_topology(spec.clone(), "three-region", json!({"traffic": {"amplitude": 0, "base_rate": rate}}));
            s.seed = seed;
            let out = run(&s, false);
            let dev = out.report.deviation.as_ref().unwrap();
            let flagged = dev.flagged();
            let max_judged = dev
                .windows
                .iter()
                .zip(&dev.excluded)
                .filter(|(_, &x)| !x)
                .map(|(d, _)| d.magnitude())
                .fold(0.0, f64::max);
            ok &= (flagged > 0) == expect_flag;
            if seed == 1 {
                lines.push(format!(
                    "util {:.2}: {flagged} flagged, max |dev| {max_judged:.4}",
                    mean_busy(&out, 60)
                ));
            }
        }
    }
    ensure(ok, lines.join("; "))
}

fn unbounded_queue() -> Check {
    let spec = load("unbounded-queue.json");
    let out = run(&spec, false);
    let death = out.report.deaths.first().ok_or("no instance death")?.time.as_secs_f64();
    let memory: Vec<f64> = out
        .sink
        .series(&MetricId::MemoryProxy("api".into()), GroupTag::Global)
        .unwrap()
        .samples
        .iter()
        .filter(|(start, _)| start + spec.window <= death)
        .map(|&(_, v)| v)
        .collect();
    let monotone = memory.windows(2).all(|p| p[0] <= p[1]);

    let bounded = with_topology(spec.clone(), "unbounded-queue", json!({"services": {"api": {"queue": {"bounded": 200}}}}));
    let b = run(&bounded, false);
    let windows = b.report.series.global.samples.len();
    let errors = |o: &RunOutput| o.sink.windows().iter().map(|w| w.boundary[0].failures).sum::<u64>();
    let mut calm = bounded.clone();
    calm.faults.clear();
    let baseline_errors = errors(&run(&calm, false));
    let faulted_errors = errors(&b);
    ensure(
        monotone
            && memory.len() >= 2
            && death <= spec.duration
            && b.report.deaths.is_empty()
            && windows == (spec.duration / spec.window) as usize
            && faulted_errors > baseline_errors,
        format!(
            "unbounded: death at {death:.0}s after {} monotone windows; bounded: {windows} windows, 0 deaths, {faulted_errors} errors vs {baseline_errors} without fault",
            memory.len()
        ),
    )
}

fn cached_errors() -> Check {
    let spec = load("cache-poisoning.json");
    let ttl = 30.0;
    let audit = |cache_errors: bool| {
        let s = with_topology(
            spec.clone(),
            "cache-poisoning",
            json!({"services": {"metadata-cache": {"cache": {"ttl_s": ttl, "cache_errors": cache_errors}}}}),
        );
        let out = run(&s, true);
        let t = out.trace.unwrap();
        assert_eq!(t.firings.len(), 1, "exactly one induced error");
        let fired = t.firings[0].time.as_secs_f64();
        let failed: Vec<_> = t.boundary.iter().filter(|b| b.outcome.is_failure()).collect();
        let users: BTreeSet<u64> = failed
            .iter()
            .filter(|b| b.time.as_secs_f64() <= fired + ttl)
            .map(|b| b.user)
            .collect();
        (users.len(), failed.len())
    };
    let (users_on, _) = audit(true);
    let (users_off, total_off) = audit(false);
    ensure(
        users_on >= 2 && total_off == 1,
        format!("cache_errors=true: {users_on} users served the error within TTL; cache_errors=false: {total_off} failure(s), {users_off} user"),
    )
}

fn early_abort() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let spec = load("guardrail-abort.json");
    let o = chaoslab()
        .arg("run")
        .arg(specs_dir().join("guardrail-abort.json"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    let s: Value = serde_json::from_slice(&o.stdout).map_err(|e| e.to_string())?;
    let effect = s["effect"].as_f64().ok_or("no effect at abort")?;
    ensure(
        o.status.code() == Some(2) && effect.abs() < spec.delta,
        format!(
            "exit {:?} after {} windows on {}; effect {effect:.4} vs delta {}",
            o.status.code(),
            s["windows"],
            s["breaches"][0],
            spec.delta
        ),
    )
}

fn scheduler_cadences() -> Check {
    let start = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
    let end = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap();
    let business = Cadence::ContinuousBusinessHours {
        period_s: 1800,
        utc_offset_minutes: 0,
        start_hour: 9,
        end_hour: 17,
    };
    let monthly = Cadence::Monthly {
        day: 1,
        hour: 3,
        minute: 0,
        utc_offset_minutes: 0,
    };
    let in_hours = |t: DateTime<Utc>| !matches!(t.weekday(), Weekday::Sat | Weekday::Sun) && (9..17).contains(&t.hour());
    let fires = business.fires_in(start, end);
    let bad_year = fires.iter().filter(|t| !in_hours(**t)).count();
    let weekdays = (0..365)
        .map(|d| start + Duration::days(d))
        .filter(|t| !matches!(t.weekday(), Weekday::Sat | Weekday::Sun))
        .count();
    let monthly_year = monthly.fires_in(start, end).len();

    let mut bad_random = 0;
    let mut bad_monthly = 0;
    for i in 0..10_000u64 {
        let now = start + Duration::seconds((mix64(i) % (365 * 86_400)) as i64);
        let next = business.next_at_or_after(now);
        if next < now || !in_hours(next) {
            bad_random += 1;
        }
        if monthly.fires_in(now, now + Duration::days(365)).len() != 12 {
            bad_monthly += 1;
        }
    }
    ensure(
        bad_year == 0 && fires.len() == weekdays * 16 && monthly_year == 12 && bad_random == 0 && bad_monthly == 0,
        format!(
            "{} business-hours fires ({bad_year} out of hours), {monthly_year} monthly; 10000 random instants: {bad_random} bad next fires, {bad_monthly} bad monthly years",
            fires.len()
        ),
    )
}

fn scoping_coherence() -> Check {
    let spec = parse_spec_value(&json!({
        "name": "audit",
        "topology": {"base": "three-region", "patch": {"traffic": {"population": 100000}}},
        "group": {"fraction": 0.05, "salt": "audit"},
        "faults": [
            {"kind": "fail-service", "target": {"service": "bookmark"},
             "scope": {"mode": "fraction", "fraction": 0.05, "salt": "audit"},
             "window": {"start_ms": 0, "duration_ms": 3600000}},
            {"kind": "inject-latency", "extra_ms": 50, "target": {"edge": {"caller": "api", "callee": "playback"}},
             "scope": {"mode": "fraction", "fraction": 0.05, "salt": "audit"},
             "window": {"start_ms": 0, "duration_ms": 3600000}}
        ],
        "duration": 3600,
        "window": 10
    }))
    .unwrap();
    let out = run(&spec, true);
    let trace = out.trace.unwrap();
    // Independent assignment, recomputed from scratch.
    let groups = assign_groups(100_000, 0.05, "audit").unwrap();
    let stray = trace.firings.iter().filter(|f| groups.group_of(f.user) != GroupTag::Experiment).count();
    let g = out.report.groups;
    let spread = (g.experiment as f64 - g.control as f64).abs() / g.control as f64;
    ensure(
        stray == 0 && !trace.firings.is_empty() && spread <= 0.01,
        format!(
            "{} firings, {stray} outside the experiment group; sizes {} / {} (spread {:.4})",
            trace.firings.len(),
            g.experiment,
            g.control,
            spread
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("determinism and replay", determinism_and_replay),
        ("bookmark fallback upheld", bookmark_fallback),
        ("criticality detected", criticality),
        ("null calibration", null_calibration),
        ("region evacuation", chaos_kong),
        ("unbounded queue failure", unbounded_queue),
        ("cached error failure", cached_errors),
        ("early abort", early_abort),
        ("scheduler cadences", scheduler_cadences),
        ("group and scope coherence", scoping_coherence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|x| x == &n.to_string() || name.contains(x.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {n:>2} {name}: PASS ({d}) [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({d}) [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

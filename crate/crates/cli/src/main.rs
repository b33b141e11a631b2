//! `chaoslab`: validate documents, run experiments, replay reports and run
//! schedules. Human output goes to stderr, machine summaries to stdout.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::Duration as StdDuration;

use chaoslab_core::experiment::{
    parse_report, parse_spec, replay, run_experiment_with, validate_spec, write_outputs, ExperimentError,
    ExperimentReport, ExperimentSpec, RunOptions, Status,
};
use chaoslab_core::faults::UserScope;
use chaoslab_core::metrics::{GroupTag, CSV_HEADER};
use chaoslab_core::scheduler::{execute_due, next_due, parse_schedule_file, RunHistory, Schedule, ScheduleError};
use chaoslab_core::sim::load_topology_value;
use chrono::{DateTime, Duration, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

/// Process exit status. The code is the only machine contract besides the
/// files written.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Exit {
    Ok = 0,
    Refuted = 1,
    Aborted = 2,
    Config = 3,
    Internal = 4,
}

impl From<Status> for Exit {
    fn from(s: Status) -> Self {
        match s {
            Status::Upheld => Exit::Ok,
            Status::Refuted => Exit::Refuted,
            Status::Aborted => Exit::Aborted,
        }
    }
}

impl From<&ExperimentError> for Exit {
    fn from(e: &ExperimentError) -> Self {
        if e.is_config() {
            Exit::Config
        } else {
            Exit::Internal
        }
    }
}

impl From<&ScheduleError> for Exit {
    fn from(e: &ScheduleError) -> Self {
        match e {
            ScheduleError::InvalidCadence(_) | ScheduleError::Config { .. } => Exit::Config,
            _ => Exit::Internal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "chaoslab", version, about = "Chaos experiments on a simulated service graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Overrides {
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated duration in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Significance level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Minimum relative effect that counts.
    #[arg(long)]
    delta: Option<f64>,
    /// Experiment group fraction; fault scopes sharing the group salt follow.
    #[arg(long)]
    fraction: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check topology, experiment or schedule documents.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Run one experiment and write its report and metric series.
    Run {
        spec: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory.
        #[arg(long, env = "CHAOSLAB_OUT", default_value = "chaoslab-out")]
        out: PathBuf,
        /// What to print on stdout.
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Rerun a report from its snapshot and compare.
    Replay { report: PathBuf },
    /// Summarise a stored report.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Run registered schedules in the foreground.
    Schedule {
        file: PathBuf,
        /// Reports directory; defaults to `reports/` next to the schedule file.
        #[arg(long, env = "CHAOSLAB_OUT")]
        out: Option<PathBuf>,
        /// Evaluate a single tick and exit.
        #[arg(long)]
        once: bool,
        /// Pretend the current time is this RFC 3339 instant.
        #[arg(long)]
        now: Option<DateTime<Utc>>,
        /// Seconds between checks.
        #[arg(long, default_value_t = 60)]
        tick: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { paths } => cmd_validate(&paths),
        Command::Run {
            spec,
            overrides,
            out,
            format,
        } => cmd_run(&spec, &overrides, &out, format),
        Command::Replay { report } => cmd_replay(&report),
        Command::Report { report, format } => cmd_report(&report, format),
        Command::Schedule {
            file,
            out,
            once,
            now,
            tick,
        } => cmd_schedule(&file, out, once, now, tick),
    };
    ExitCode::from(code as u8)
}

fn fail(e: &ExperimentError) -> Exit {
    eprintln!("error: {e}");
    Exit::from(e)
}

fn read_json(path: &Path) -> Result<Value, ExperimentError> {
    let text =
        fs::read_to_string(path).map_err(|e| ExperimentError::config("", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::config("", format!("{}: {e}", path.display())))
}

fn base_dir(path: &Path) -> Option<PathBuf> {
    path.parent().map(Path::to_path_buf)
}

fn load_spec(path: &Path) -> Result<ExperimentSpec, ExperimentError> {
    let text =
        fs::read_to_string(path).map_err(|e| ExperimentError::config("", format!("{}: {e}", path.display())))?;
    parse_spec(&text)
}

fn validate_one(path: &Path) -> Result<&'static str, String> {
    let v = read_json(path).map_err(|e| e.to_string())?;
    if v.get("schedules").is_some() {
        let text = serde_json::to_string(&v).expect("value serializes");
        let f = parse_schedule_file(&text).map_err(|e| e.to_string())?;
        let dir = base_dir(path).unwrap_or_default();
        for (i, s) in f.schedules.iter().enumerate() {
            let spec_path = dir.join(&s.spec);
            load_spec(&spec_path)
                .and_then(|spec| validate_spec(&spec, spec_path.parent()))
                .map_err(|e| format!("schedules[{i}].spec ({}): {e}", s.spec))?;
        }
        Ok("schedule file")
    } else if v.get("entry_service").is_some() {
        load_topology_value(&v).map_err(|e| e.to_string())?;
        Ok("topology")
    } else {
        let spec = load_spec(path).map_err(|e| e.to_string())?;
        validate_spec(&spec, path.parent()).map_err(|e| e.to_string())?;
        Ok("experiment")
    }
}

fn cmd_validate(paths: &[PathBuf]) -> Exit {
    let mut code = Exit::Ok;
    let mut results = Vec::new();
    for p in paths {
        match validate_one(p) {
            Ok(kind) => {
                eprintln!("ok      {} ({kind})", p.display());
                results.push(json!({"path": p.display().to_string(), "ok": true, "kind": kind}));
            }
            Err(msg) => {
                eprintln!("invalid {}: {msg}", p.display());
                results.push(json!({"path": p.display().to_string(), "ok": false, "error": msg}));
                code = Exit::Config;
            }
        }
    }
    println!("{}", json!({ "results": results }));
    code
}

fn apply_overrides(spec: &mut ExperimentSpec, o: &Overrides) {
    if let Some(s) = o.seed {
        spec.seed = s;
    }
    if let Some(d) = o.duration {
        spec.duration = d;
    }
    if let Some(a) = o.alpha {
        spec.alpha = a;
    }
    if let Some(d) = o.delta {
        spec.delta = d;
    }
    if let Some(f) = o.fraction {
        spec.group.fraction = f;
        for fault in &mut spec.faults {
            if let UserScope::Fraction { fraction, salt } = &mut fault.scope {
                if *salt == spec.group.salt {
                    *fraction = f;
                }
            }
        }
    }
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.prec$}"))
}

fn print_table(r: &ExperimentReport) {
    let v = &r.verdict;
    eprintln!("experiment  {}", r.snapshot.spec.name);
    eprintln!("topology    {} (version {})", r.snapshot.spec.topology.get("name").and_then(Value::as_str).unwrap_or("-"), r.snapshot.topology_version);
    eprintln!(
        "groups      control {}  experiment {}  of {}",
        r.groups.control, r.groups.experiment, r.groups.population
    );
    eprintln!("windows     {}", v.windows);
    eprintln!("effect      {}", fmt_opt(v.effect, 4));
    eprintln!("p-value     {}", fmt_opt(v.p_value, 4));
    if let Some(d) = &r.deviation {
        eprintln!("flagged     {} window(s) outside ±{}", d.flagged(), d.band);
    }
    for b in &r.breaches {
        eprintln!(
            "breach      {} {:?} {} at window {} (value {:.3})",
            b.metric, b.direction, b.threshold, b.tripped_window, b.value
        );
    }
    if !r.deaths.is_empty() {
        eprintln!("deaths      {}", r.deaths.len());
    }
    eprintln!("verdict     {:?}", v.status);
}

fn summary(r: &ExperimentReport, files: Option<(&Path, &Path)>) -> Value {
    let mut s = json!({
        "name": r.snapshot.spec.name,
        "status": r.verdict.status,
        "mode": r.verdict.mode,
        "effect": r.verdict.effect,
        "p_value": r.verdict.p_value,
        "windows": r.verdict.windows,
        "breaches": r.breaches.iter().map(|b| b.metric.to_string()).collect::<Vec<_>>(),
        "deaths": r.deaths.len(),
    });
    if let Some((report, csv)) = files {
        s["report"] = json!(report.display().to_string());
        s["csv"] = json!(csv.display().to_string());
    }
    s
}

fn series_csv(r: &ExperimentReport) -> String {
    let mut out = format!("{}\n", CSV_HEADER.join(","));
    for s in [&r.series.global, &r.series.control, &r.series.experiment] {
        let group = match s.group {
            GroupTag::Global => "global",
            GroupTag::Control => "control",
            GroupTag::Experiment => "experiment",
            GroupTag::Unassigned => "unassigned",
        };
        for (t, v) in &s.samples {
            out.push_str(&format!("{},{group},{t},{v}\n", s.metric));
        }
    }
    out
}

fn cmd_run(path: &Path, overrides: &Overrides, out: &Path, format: Format) -> Exit {
    let mut spec = match load_spec(path) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    apply_overrides(&mut spec, overrides);
    let opts = RunOptions {
        trace: false,
        base_dir: base_dir(path),
    };
    let output = match run_experiment_with(&spec, &opts) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let files = match write_outputs(&output, out, None) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: writing outputs: {e}");
            return Exit::Internal;
        }
    };
    print_table(&output.report);
    eprintln!("report      {}", files.report.display());
    eprintln!("series      {}", files.csv.display());
    match format {
        Format::Json => println!("{}", summary(&output.report, Some((&files.report, &files.csv)))),
        Format::Csv => match fs::read_to_string(&files.csv) {
            Ok(text) => print!("{text}"),
            Err(e) => {
                eprintln!("error: {e}");
                return Exit::Internal;
            }
        },
    }
    output.report.verdict.status.into()
}

fn load_report(path: &Path) -> Result<ExperimentReport, ExperimentError> {
    let text =
        fs::read_to_string(path).map_err(|e| ExperimentError::config("", format!("{}: {e}", path.display())))?;
    parse_report(&text)
}

fn cmd_replay(path: &Path) -> Exit {
    let stored = match load_report(path) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    match replay(&stored) {
        Ok(_) => {
            eprintln!("replay matches: {} windows, verdict {:?}", stored.verdict.windows, stored.verdict.status);
            println!("{}", json!({"match": true}));
            Exit::Ok
        }
        Err(e @ ExperimentError::ReplayMismatch { .. }) => {
            eprintln!("error: {e}");
            let (field, window) = match &e {
                ExperimentError::ReplayMismatch { field, window } => (field.clone(), *window),
                _ => unreachable!(),
            };
            println!("{}", json!({"match": false, "field": field, "window": window}));
            Exit::Internal
        }
        Err(e) => fail(&e),
    }
}

fn cmd_report(path: &Path, format: Format) -> Exit {
    let r = match load_report(path) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    print_table(&r);
    match format {
        Format::Json => println!("{}", summary(&r, None)),
        Format::Csv => print!("{}", series_csv(&r)),
    }
    r.verdict.status.into()
}

fn run_schedule(dir: &Path, s: &Schedule) -> Result<ExperimentReport, ExperimentError> {
    let spec_path = dir.join(&s.spec);
    let spec = load_spec(&spec_path)?;
    let opts = RunOptions {
        trace: false,
        base_dir: base_dir(&spec_path),
    };
    run_experiment_with(&spec, &opts).map(|o| o.report)
}

fn cmd_schedule(file: &Path, out: Option<PathBuf>, once: bool, now: Option<DateTime<Utc>>, tick: u64) -> Exit {
    let text = match fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            return Exit::Config;
        }
    };
    let sf = match parse_schedule_file(&text) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return Exit::from(&e);
        }
    };
    let dir = base_dir(file).unwrap_or_default();
    let reports = out.unwrap_or_else(|| dir.join("reports"));
    let history_path = sf
        .history
        .as_ref()
        .map_or_else(|| reports.join("history.jsonl"), |h| dir.join(h));
    let mut history = match RunHistory::open(&history_path) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {e}");
            return Exit::from(&e);
        }
    };
    let tick = tick.max(1);
    let clock = |start_wall: DateTime<Utc>| now.map_or_else(Utc::now, |n| n + (Utc::now() - start_wall));
    let start_wall = Utc::now();
    let mut since = clock(start_wall) - Duration::seconds(tick as i64);
    loop {
        let t = clock(start_wall);
        let records = match execute_due(&sf.schedules, since, t, &mut history, &reports, |s| run_schedule(&dir, s)) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: {e}");
                return Exit::from(&e);
            }
        };
        for r in &records {
            eprintln!("{}  {:<24} {}", r.timestamp.format("%Y-%m-%dT%H:%M:%SZ"), r.schedule, r.verdict);
            println!("{}", serde_json::to_string(r).expect("record serializes"));
        }
        if once {
            for (s, at) in next_due(&sf.schedules, t) {
                eprintln!("next  {:<24} {}", s.name, at.to_rfc3339());
            }
            return if records.iter().any(|r| r.error.is_some()) {
                Exit::Internal
            } else {
                Exit::Ok
            };
        }
        since = t;
        thread::sleep(StdDuration::from_secs(tick));
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chaoslab"));
    c.env_remove("CHAOSLAB_OUT");
    c
}

fn specs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("specs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {:?}", String::from_utf8_lossy(&o.stdout)))
}

fn run(spec: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(spec).arg("--out").arg(out).args(extra).output().unwrap()
}

fn write_variant(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(specs().join("bookmark-fallback.json")).unwrap()).unwrap();
    edit(&mut v);
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p
}

#[test]
fn validate_accepts_examples_and_names_bad_paths() {
    let o = bin().arg("validate").args(["bookmark-fallback.json", "kong.json", "schedules.json"]).current_dir(specs()).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["results"].as_array().unwrap().len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let bad_alpha = write_variant(dir.path(), "alpha.json", |v| v["alpha"] = 1.5.into());
    let o = bin().arg("validate").arg(&bad_alpha).output().unwrap();
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`alpha`"));

    let bad_salt = write_variant(dir.path(), "salt.json", |v| v["faults"][0]["scope"]["salt"] = "other".into());
    let o = bin().arg("validate").arg(&bad_salt).output().unwrap();
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("faults[0].scope.salt"));

    let o = bin().arg("validate").arg(dir.path().join("missing.json")).output().unwrap();
    assert_eq!(code(&o), 3);
}

#[test]
fn run_exit_codes_follow_the_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&specs().join("bookmark-fallback.json"), dir.path(), &["--duration", "600"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout_json(&o);
    assert_eq!(s["status"], "upheld");
    let report: Value = serde_json::from_str(&fs::read_to_string(s["report"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(report["verdict"]["status"], "upheld");
    assert!(Path::new(s["csv"].as_str().unwrap()).exists());

    let o = run(&specs().join("critical-no-fallback.json"), dir.path(), &["--duration", "600"]);
    assert_eq!(code(&o), 1);
    assert_eq!(stdout_json(&o)["status"], "refuted");

    let o = run(&specs().join("guardrail-abort.json"), dir.path(), &[]);
    assert_eq!(code(&o), 2);
    let s = stdout_json(&o);
    assert_eq!(s["breaches"][0], "p99_latency_ms/api");
    let report: Value = serde_json::from_str(&fs::read_to_string(s["report"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(report["breaches"][0]["metric"], "p99_latency_ms/api");
}

#[test]
fn overrides_and_output_env() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("run")
        .arg(specs().join("bookmark-fallback.json"))
        .args(["--duration", "300", "--seed", "99", "--fraction", "0.1", "--alpha", "0.01", "--delta", "0.05"])
        .env("CHAOSLAB_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bookmark-fallback.report.json")).unwrap()).unwrap();
    let spec = &report["snapshot"]["spec"];
    assert_eq!(spec["seed"], 99);
    assert_eq!(spec["duration"], 300.0);
    assert_eq!(spec["alpha"], 0.01);
    assert_eq!(spec["group"]["fraction"], 0.1);
    assert_eq!(spec["faults"][0]["scope"]["fraction"], 0.1);
    assert_eq!(report["series"]["global"]["samples"].as_array().unwrap().len(), 30);
}

#[test]
fn csv_format_and_byte_identical_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let spec = specs().join("kong.json");
    let oa = run(&spec, &a, &["--duration", "900", "--format", "csv"]);
    let ob = run(&spec, &b, &["--duration", "900", "--format", "csv"]);
    assert_eq!(code(&oa), 0);
    assert!(oa.stdout.starts_with(b"metric,group,window_start_s,value\n"));
    assert_eq!(oa.stdout, ob.stdout);
    let csv = |d: &Path| fs::read(d.join("kong.metrics.csv")).unwrap();
    assert_eq!(csv(&a), csv(&b));
}

#[test]
fn replay_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&specs().join("bookmark-fallback.json"), dir.path(), &["--duration", "300"]);
    // Either verdict works here; only reproduction matters.
    let verdict_code = code(&o);
    assert!(verdict_code <= 1, "{}", String::from_utf8_lossy(&o.stderr));
    let report_path = dir.path().join("bookmark-fallback.report.json");
    let o = bin().arg("replay").arg(&report_path).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["match"], true);

    let mut v: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    v["series"]["global"]["samples"][4][1] = 0.5.into();
    let tampered = dir.path().join("tampered.json");
    fs::write(&tampered, v.to_string()).unwrap();
    let o = bin().arg("replay").arg(&tampered).output().unwrap();
    assert_eq!(code(&o), 4);
    let s = stdout_json(&o);
    assert_eq!((s["field"].as_str(), s["window"].as_u64()), (Some("series.global"), Some(4)));

    v.as_object_mut().unwrap().remove("snapshot");
    let bare = dir.path().join("bare.json");
    fs::write(&bare, v.to_string()).unwrap();
    assert_eq!(code(&bin().arg("replay").arg(&bare).output().unwrap()), 3);

    let o = bin().args(["report", "--format", "csv"]).arg(&report_path).output().unwrap();
    assert_eq!(code(&o), verdict_code);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 1 + 3 * 30);
}

#[test]
fn schedule_once_runs_due_entries() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["bookmark-fallback.json", "kong.json"] {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(specs().join(f)).unwrap()).unwrap();
        v["duration"] = 300.0.into();
        fs::write(dir.path().join(f), v.to_string()).unwrap();
    }
    fs::copy(specs().join("schedules.json"), dir.path().join("schedules.json")).unwrap();
    // Monday 1 December 2025 14:00 UTC is 09:00 at UTC-5 and the monthly slot.
    let o = bin()
        .arg("schedule")
        .arg(dir.path().join("schedules.json"))
        .args(["--once", "--now", "2025-12-01T14:00:00Z", "--tick", "60"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let records: Vec<Value> = String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let names: Vec<&str> = records.iter().map(|r| r["schedule"].as_str().unwrap()).collect();
    assert_eq!(names, ["bookmark-weekday", "kong-monthly"]);
    let history = fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert_eq!(fs::read_dir(dir.path().join("reports")).unwrap().count(), 2);
}

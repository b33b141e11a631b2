use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ExperimentError;
use crate::faults::{compile_fault, FaultSpec, UserScope};
use crate::hashing::{Concern, SeedTree};
use crate::metrics::{Guardrail, MetricId, DEFAULT_WINDOW_S};
use crate::sim::{fixtures, load_topology_value, Topology, TopologyError};

use super::stats::{Mode, MIN_WINDOWS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbortPolicy {
    #[default]
    OnBreach,
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_salt")]
    pub salt: String,
}

impl Default for GroupSpec {
    fn default() -> Self {
        Self {
            fraction: default_fraction(),
            salt: default_salt(),
        }
    }
}

/// Settings for experiments judged against a paired no-fault run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    /// Relative deviation tolerated per window.
    #[serde(default = "default_band")]
    pub band: f64,
    /// Seconds after each fault activation or revert that are not judged.
    #[serde(default = "default_transient")]
    pub transient_s: f64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            band: default_band(),
            transient_s: default_transient(),
        }
    }
}

fn default_fraction() -> f64 {
    0.05
}
fn default_salt() -> String {
    "chaoslab".into()
}
fn default_band() -> f64 {
    0.02
}
fn default_transient() -> f64 {
    60.0
}
fn default_metric() -> MetricId {
    MetricId::Sps
}
fn default_duration() -> f64 {
    3600.0
}
fn default_window() -> f64 {
    DEFAULT_WINDOW_S
}
fn default_delta() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    0.05
}
fn default_permutations() -> u32 {
    999
}

/// Experiment document.
///
/// `topology` is a fixture name, a path to a topology file (relative to the
/// spec file), an inline topology document, or `{"base": .., "patch": ..}`
/// where `patch` is merged into the base document. In a patch, `services`
/// and `regions` are objects keyed by id whose fields override the base
/// entry; other keys replace the base value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub topology: Value,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_metric")]
    pub metric: MetricId,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub group: GroupSpec,
    /// Simulated seconds.
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Window length in simulated seconds.
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_permutations")]
    pub permutations: u32,
    #[serde(default)]
    pub guardrails: Vec<Guardrail>,
    #[serde(default)]
    pub abort_policy: AbortPolicy,
    #[serde(default)]
    pub baseline: BaselineSpec,
}

/// Parses an experiment document, naming the offending path on error.
pub fn parse_spec(text: &str) -> Result<ExperimentSpec, ExperimentError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ExperimentError::config(path, e.into_inner().to_string())
    })
}

/// Same as [`parse_spec`] for an already-parsed value.
pub fn parse_spec_value(value: &Value) -> Result<ExperimentSpec, ExperimentError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ExperimentError::config(path, e.into_inner().to_string())
    })
}

/// A spec after validation, with its topology loaded.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub spec: ExperimentSpec,
    pub topology: Topology,
    pub mode: Mode,
    pub windows: usize,
}

impl Resolved {
    /// The spec with the topology inlined, so it replays without files.
    pub fn snapshot(&self) -> ExperimentSpec {
        let mut s = self.spec.clone();
        s.topology = serde_json::to_value(self.topology.to_doc()).expect("topology serializes");
        s
    }
}

fn topo_err(e: TopologyError) -> ExperimentError {
    match &e {
        TopologyError::Cycle(_) => ExperimentError::config("topology", e.to_string()),
        _ => {
            let path = e.path().filter(|p| !p.is_empty() && *p != ".").unwrap_or("");
            let full = if path.is_empty() {
                "topology".to_string()
            } else {
                format!("topology.{path}")
            };
            ExperimentError::config(full, e.to_string())
        }
    }
}

fn load_named(name: &str, base_dir: Option<&Path>) -> Result<Value, ExperimentError> {
    if let Some(src) = fixtures::source(name) {
        return serde_json::from_str(src).map_err(|e| ExperimentError::config("topology", e.to_string()));
    }
    let mut p = PathBuf::from(name);
    if p.is_relative() {
        if let Some(d) = base_dir {
            p = d.join(p);
        }
    }
    let text = std::fs::read_to_string(&p).map_err(|e| {
        ExperimentError::config("topology", format!("`{name}` is neither a fixture nor a readable file: {e}"))
    })?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::config("topology", format!("{}: {e}", p.display())))
}

fn merge_keyed(base: &mut Value, key: &str, patch: &Value) -> Result<(), ExperimentError> {
    let path = format!("topology.patch.{key}");
    let Value::Object(entries) = patch else {
        return Err(ExperimentError::config(path, "expected an object keyed by id"));
    };
    let list = base
        .get_mut(key)
        .and_then(Value::as_array_mut)
        .ok_or_else(|| ExperimentError::config(path.clone(), "base has no such list"))?;
    for (id, fields) in entries {
        let item = list
            .iter_mut()
            .find(|v| v.get("id").and_then(Value::as_str) == Some(id))
            .ok_or_else(|| ExperimentError::config(format!("{path}.{id}"), "no entry with this id"))?;
        let (Value::Object(dst), Value::Object(src)) = (item, fields) else {
            return Err(ExperimentError::config(format!("{path}.{id}"), "expected an object"));
        };
        for (k, v) in src {
            dst.insert(k.clone(), v.clone());
        }
    }
    Ok(())
}

/// Resolves the `topology` field of a spec into a topology document.
pub fn resolve_topology_value(topology: &Value, base_dir: Option<&Path>) -> Result<Value, ExperimentError> {
    match topology {
        Value::String(name) => load_named(name, base_dir),
        Value::Object(o) if o.contains_key("base") => {
            let base_name = o
                .get("base")
                .and_then(Value::as_str)
                .ok_or_else(|| ExperimentError::config("topology.base", "expected a fixture name or path"))?;
            if let Some(k) = o.keys().find(|k| *k != "base" && *k != "patch") {
                return Err(ExperimentError::config(format!("topology.{k}"), "unknown field"));
            }
            let mut doc = load_named(base_name, base_dir)?;
            if let Some(patch) = o.get("patch") {
                let Value::Object(patch) = patch else {
                    return Err(ExperimentError::config("topology.patch", "expected an object"));
                };
                for (k, v) in patch {
                    match k.as_str() {
                        "services" | "regions" => merge_keyed(&mut doc, k, v)?,
                        "traffic" => {
                            let (Some(Value::Object(dst)), Value::Object(src)) = (doc.get_mut("traffic"), v) else {
                                return Err(ExperimentError::config("topology.patch.traffic", "expected an object"));
                            };
                            for (tk, tv) in src {
                                dst.insert(tk.clone(), tv.clone());
                            }
                        }
                        _ => {
                            doc[k.as_str()] = v.clone();
                        }
                    }
                }
            }
            Ok(doc)
        }
        Value::Object(_) => Ok(topology.clone()),
        _ => Err(ExperimentError::config(
            "topology",
            "expected a fixture name, a path or a topology document",
        )),
    }
}

/// Full validation of a spec; every error names a document path.
pub fn validate_spec(spec: &ExperimentSpec, base_dir: Option<&Path>) -> Result<Resolved, ExperimentError> {
    let bad = |path: &str, msg: &str| Err(ExperimentError::config(path, msg));
    if spec.name.trim().is_empty() {
        return bad("name", "must not be empty");
    }
    if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
        return bad("alpha", "must be in (0, 1)");
    }
    if !(spec.delta.is_finite() && spec.delta >= 0.0) {
        return bad("delta", "must be >= 0");
    }
    if spec.permutations < 99 {
        return bad("permutations", "must be >= 99");
    }
    if !(spec.window.is_finite() && spec.window > 0.0) {
        return bad("window", "must be > 0");
    }
    if !(spec.duration.is_finite() && spec.duration > 0.0) {
        return bad("duration", "must be > 0");
    }
    let windows = (spec.duration / spec.window + 1e-9).floor() as usize;
    if windows < MIN_WINDOWS {
        return bad("duration", &format!("must span at least {MIN_WINDOWS} windows"));
    }
    if !(spec.group.fraction > 0.0 && spec.group.fraction <= 0.5) {
        return bad("group.fraction", "must be in (0, 0.5]");
    }
    if spec.metric.service().is_some() {
        return bad("metric", "the steady-state metric must be a boundary metric");
    }
    if !(spec.baseline.band.is_finite() && spec.baseline.band > 0.0) {
        return bad("baseline.band", "must be > 0");
    }
    if !(spec.baseline.transient_s.is_finite() && spec.baseline.transient_s >= 0.0) {
        return bad("baseline.transient_s", "must be >= 0");
    }

    let doc = resolve_topology_value(&spec.topology, base_dir)?;
    let topology = load_topology_value(&doc).map_err(topo_err)?;

    let mut rng = SeedTree::new(spec.seed).rng(Concern::Faults);
    for (i, f) in spec.faults.iter().enumerate() {
        compile_fault(f, &topology, &format!("faults[{i}]"), &mut rng)
            .map_err(|e| ExperimentError::config(e.path().unwrap_or("faults"), e.to_string()))?;
        if let UserScope::Fraction { fraction, salt } = &f.scope {
            if *salt != spec.group.salt {
                return bad(&format!("faults[{i}].scope.salt"), "must equal group.salt");
            }
            if *fraction != spec.group.fraction {
                return bad(&format!("faults[{i}].scope.fraction"), "must equal group.fraction");
            }
        }
    }
    let services: Vec<&str> = topology.services().iter().map(|s| s.id.as_str()).collect();
    for (i, g) in spec.guardrails.iter().enumerate() {
        g.validate()
            .map_err(|e| ExperimentError::config(format!("guardrails[{i}]"), e.to_string()))?;
        if let Some(s) = g.metric.service() {
            if !services.contains(&s) {
                return bad(&format!("guardrails[{i}].metric"), &format!("unknown service `{s}`"));
            }
        }
    }

    let mode = if !spec.faults.is_empty() && spec.faults.iter().all(|f| f.scope == UserScope::All) {
        Mode::Baseline
    } else {
        Mode::ControlGroup
    };
    Ok(Resolved {
        spec: spec.clone(),
        topology,
        mode,
        windows,
    })
}

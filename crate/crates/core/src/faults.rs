//! Fault specifications, user scoping and compilation into simulator hooks.
//!
//! Five event classes are supported: instance termination, injected
//! latency and injected failures between services, whole-service failure,
//! and region outage (blackhole or evacuation). Per-call faults may be
//! limited to a hashed slice of the user population; physical faults
//! (instances, regions) always affect everyone routed to the target.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{bucket, bucket_bound, hash_str};
use crate::sim::{SimTime, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error("unknown target at `{path}`: `{name}`")]
    UnknownTarget { path: String, name: String },
    #[error("`{kind}` cannot target {target} (at `{path}`)")]
    TargetMismatch { path: String, kind: String, target: String },
    #[error("`{kind}` is a physical fault and needs scope `all` (at `{path}`)")]
    ScopeMismatch { path: String, kind: String },
    #[error("invalid parameter at `{path}`: {message}")]
    InvalidParam { path: String, message: String },
    #[error("missing parameter `{path}`")]
    MissingParam { path: String },
    #[error("evacuation would leave no healthy region")]
    AllRegionsDown,
}

impl FaultError {
    pub fn path(&self) -> Option<&str> {
        match self {
            FaultError::UnknownTarget { path, .. }
            | FaultError::TargetMismatch { path, .. }
            | FaultError::ScopeMismatch { path, .. }
            | FaultError::InvalidParam { path, .. }
            | FaultError::MissingParam { path } => Some(path),
            FaultError::AllRegionsDown => None,
        }
    }
}

/// Event class of a fault. Catalog template names are accepted as aliases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKindName {
    #[serde(alias = "chaos-monkey")]
    TerminateInstance,
    #[serde(alias = "latency-fit")]
    InjectLatency,
    #[serde(alias = "failure-fit")]
    FailRequests,
    #[serde(alias = "service-blackout")]
    FailService,
    #[serde(alias = "chaos-kong")]
    RegionOutage,
}

impl FaultKindName {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultKindName::TerminateInstance => "terminate-instance",
            FaultKindName::InjectLatency => "inject-latency",
            FaultKindName::FailRequests => "fail-requests",
            FaultKindName::FailService => "fail-service",
            FaultKindName::RegionOutage => "region-outage",
        }
    }

    /// Physical faults hit infrastructure, not individual users.
    pub fn is_physical(self) -> bool {
        matches!(self, FaultKindName::TerminateInstance | FaultKindName::RegionOutage)
    }
}

impl fmt::Display for FaultKindName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutageMode {
    /// Instances in the region stop answering; routed requests fail.
    Blackhole,
    /// Traffic is steered away from the region; nothing is broken.
    #[default]
    Evacuate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRef {
    pub caller: String,
    pub callee: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultTarget {
    /// `service/region/index`.
    Instance(String),
    Edge(EdgeRef),
    Service(String),
    Region(String),
}

impl FaultTarget {
    fn describe(&self) -> &'static str {
        match self {
            FaultTarget::Instance(_) => "an instance",
            FaultTarget::Edge(_) => "an edge",
            FaultTarget::Service(_) => "a service",
            FaultTarget::Region(_) => "a region",
        }
    }
}

/// Which users a fault applies to. Membership is computed, never stored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum UserScope {
    #[default]
    All,
    Fraction { fraction: f64, salt: String },
}

/// Whether `user` is inside `scope`.
pub fn scope_match(user: u64, scope: &UserScope) -> bool {
    match scope {
        UserScope::All => true,
        UserScope::Fraction { fraction, salt } => bucket(user, hash_str(salt)) < bucket_bound(*fraction),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultWindow {
    pub start_ms: u64,
    pub duration_ms: u64,
}

/// A fault as written in an experiment document. Parameters are flat
/// fields; which ones are required depends on `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKindName,
    /// inject-latency: added delay in milliseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_ms: Option<f64>,
    /// inject-latency: extra uniform delay in `[0, jitter_ms]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter_ms: Option<f64>,
    /// fail-requests: per-call failure probability.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    /// fail-requests: stop after this many injected failures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<u64>,
    /// region-outage: defaults to evacuate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<OutageMode>,
    pub target: FaultTarget,
    #[serde(default)]
    pub scope: UserScope,
    pub window: FaultWindow,
}

/// Which calls a per-call fault intercepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CallMatcher {
    Edge { caller: usize, callee: usize },
    /// Every inbound call, including requests entering at the boundary.
    Service(usize),
}

impl CallMatcher {
    pub fn matches(&self, caller: Option<usize>, callee: usize) -> bool {
        match *self {
            CallMatcher::Edge { caller: c, callee: t } => caller == Some(c) && callee == t,
            CallMatcher::Service(t) => callee == t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceId {
    pub service: usize,
    pub region: usize,
    pub index: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FaultAction {
    Latency { extra_us: u64, jitter_us: u64 },
    Fail { probability: f64, limit: Option<u64> },
    Terminate(InstanceId),
    Outage { region: usize, mode: OutageMode },
}

/// Runtime hook set for one fault: activation window plus, for per-call
/// faults, the interceptor predicate. Immutable after compilation.
#[derive(Clone, Debug, PartialEq)]
pub struct CompiledFault {
    pub label: String,
    pub kind: FaultKindName,
    pub action: FaultAction,
    pub matcher: Option<CallMatcher>,
    scope: Option<(u64, u64)>,
    pub start: SimTime,
    pub end: SimTime,
}

impl CompiledFault {
    pub fn in_scope(&self, user: u64) -> bool {
        self.scope.map_or(true, |(salt, bound)| bucket(user, salt) < bound)
    }

    pub fn in_window(&self, t: SimTime) -> bool {
        self.start <= t && t < self.end
    }

    /// Interceptor predicate: does this fault apply to a call at `now`?
    pub fn intercepts(&self, now: SimTime, caller: Option<usize>, callee: usize, user: u64) -> bool {
        self.in_window(now) && self.matcher.is_some_and(|m| m.matches(caller, callee)) && self.in_scope(user)
    }
}

/// Validates a fault against a topology and resolves names to indices.
/// `rng` picks the victim of an unpinned instance termination.
pub fn compile_fault<R: Rng>(
    spec: &FaultSpec,
    topology: &Topology,
    path: &str,
    rng: &mut R,
) -> Result<CompiledFault, FaultError> {
    let kind = spec.kind;
    let at = |field: &str| format!("{path}.{field}");
    let service = |name: &str, field: &str| {
        topology.service_idx(name).ok_or_else(|| FaultError::UnknownTarget {
            path: at(field),
            name: name.to_string(),
        })
    };
    let mismatch = || FaultError::TargetMismatch {
        path: at("target"),
        kind: kind.to_string(),
        target: spec.target.describe().to_string(),
    };

    if spec.window.duration_ms == 0 {
        return Err(FaultError::InvalidParam {
            path: at("window.duration_ms"),
            message: "must be > 0".into(),
        });
    }
    let scope = match &spec.scope {
        UserScope::All => None,
        UserScope::Fraction { fraction, salt } => {
            if kind.is_physical() {
                return Err(FaultError::ScopeMismatch {
                    path: at("scope"),
                    kind: kind.to_string(),
                });
            }
            if !(0.0..=1.0).contains(fraction) {
                return Err(FaultError::InvalidParam {
                    path: at("scope.fraction"),
                    message: "must be in [0, 1]".into(),
                });
            }
            Some((hash_str(salt), bucket_bound(*fraction)))
        }
    };

    let matcher = match (&spec.target, kind) {
        (FaultTarget::Edge(e), FaultKindName::InjectLatency | FaultKindName::FailRequests) => {
            let caller = service(&e.caller, "target.edge.caller")?;
            let callee = service(&e.callee, "target.edge.callee")?;
            let declared = topology.has_edge(caller, callee) || topology.bypass_target(caller) == Some(callee);
            let via_fallback = topology.calls(caller).iter().any(|c| topology.bypass_target(c.callee) == Some(callee));
            if !declared && !via_fallback {
                return Err(FaultError::UnknownTarget {
                    path: at("target.edge"),
                    name: format!("{} -> {}", e.caller, e.callee),
                });
            }
            Some(CallMatcher::Edge { caller, callee })
        }
        (
            FaultTarget::Service(s),
            FaultKindName::InjectLatency | FaultKindName::FailRequests | FaultKindName::FailService,
        ) => Some(CallMatcher::Service(service(s, "target.service")?)),
        (FaultTarget::Instance(_) | FaultTarget::Service(_), FaultKindName::TerminateInstance) => None,
        (FaultTarget::Region(_), FaultKindName::RegionOutage) => None,
        _ => return Err(mismatch()),
    };

    let action = match kind {
        FaultKindName::InjectLatency => {
            let extra = spec.extra_ms.ok_or_else(|| FaultError::MissingParam { path: at("extra_ms") })?;
            let jitter = spec.jitter_ms.unwrap_or(0.0);
            for (v, f) in [(extra, "extra_ms"), (jitter, "jitter_ms")] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(FaultError::InvalidParam {
                        path: at(f),
                        message: "must be a finite value >= 0".into(),
                    });
                }
            }
            FaultAction::Latency {
                extra_us: SimTime::from_millis_f64(extra).micros(),
                jitter_us: SimTime::from_millis_f64(jitter).micros(),
            }
        }
        FaultKindName::FailRequests => {
            let p = spec.probability.ok_or_else(|| FaultError::MissingParam { path: at("probability") })?;
            if !(0.0..=1.0).contains(&p) {
                return Err(FaultError::InvalidParam {
                    path: at("probability"),
                    message: "must be in [0, 1]".into(),
                });
            }
            FaultAction::Fail {
                probability: p,
                limit: spec.limit,
            }
        }
        FaultKindName::FailService => FaultAction::Fail {
            probability: 1.0,
            limit: spec.limit,
        },
        FaultKindName::TerminateInstance => FaultAction::Terminate(match &spec.target {
            FaultTarget::Instance(id) => parse_instance(id, topology).ok_or_else(|| FaultError::UnknownTarget {
                path: at("target.instance"),
                name: id.clone(),
            })?,
            FaultTarget::Service(s) => {
                let svc = service(s, "target.service")?;
                let per_region = topology.services()[svc].instances_per_region;
                let n = per_region as usize * topology.regions().len();
                let pick = rng.gen_range(0..n);
                InstanceId {
                    service: svc,
                    region: pick / per_region as usize,
                    index: (pick % per_region as usize) as u32,
                }
            }
            _ => return Err(mismatch()),
        }),
        FaultKindName::RegionOutage => {
            let FaultTarget::Region(r) = &spec.target else {
                return Err(mismatch());
            };
            let region = topology.region_idx(r).ok_or_else(|| FaultError::UnknownTarget {
                path: at("target.region"),
                name: r.clone(),
            })?;
            FaultAction::Outage {
                region,
                mode: spec.mode.unwrap_or_default(),
            }
        }
    };

    let start = SimTime::from_millis(spec.window.start_ms);
    Ok(CompiledFault {
        label: format!("{path}:{kind}"),
        kind,
        action,
        matcher,
        scope,
        start,
        end: start.plus(SimTime::from_millis(spec.window.duration_ms).micros()),
    })
}

fn parse_instance(id: &str, topology: &Topology) -> Option<InstanceId> {
    let mut parts = id.split('/');
    let service = topology.service_idx(parts.next()?)?;
    let region = topology.region_idx(parts.next()?)?;
    let index: u32 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || index >= topology.services()[service].instances_per_region {
        return None;
    }
    Some(InstanceId { service, region, index })
}

/// Named, parameterizable fault template.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FaultTemplate {
    pub name: &'static str,
    pub kind: FaultKindName,
    pub description: &'static str,
    pub extra_ms: Option<f64>,
    pub probability: Option<f64>,
    pub mode: Option<OutageMode>,
}

impl FaultTemplate {
    /// Concrete fault with this template's default parameters.
    pub fn instantiate(&self, target: FaultTarget, scope: UserScope, window: FaultWindow) -> FaultSpec {
        FaultSpec {
            kind: self.kind,
            extra_ms: self.extra_ms,
            jitter_ms: None,
            probability: self.probability,
            limit: None,
            mode: self.mode,
            target,
            scope,
            window,
        }
    }
}

/// The five built-in templates.
pub fn builtin_catalog() -> Vec<FaultTemplate> {
    let t = |name, kind, description| FaultTemplate {
        name,
        kind,
        description,
        extra_ms: None,
        probability: None,
        mode: None,
    };
    vec![
        t(
            "chaos-monkey",
            FaultKindName::TerminateInstance,
            "terminate one instance, pinned or picked at random",
        ),
        FaultTemplate {
            extra_ms: Some(100.0),
            ..t("latency-fit", FaultKindName::InjectLatency, "add latency to calls between services")
        },
        FaultTemplate {
            probability: Some(1.0),
            ..t("failure-fit", FaultKindName::FailRequests, "fail calls between services")
        },
        t(
            "service-blackout",
            FaultKindName::FailService,
            "fail every inbound call of a service",
        ),
        FaultTemplate {
            mode: Some(OutageMode::Evacuate),
            ..t("chaos-kong", FaultKindName::RegionOutage, "take a region out of service")
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::{Concern, SeedTree};
    use crate::sim::fixtures;
    use serde_json::json;

    fn spec(v: serde_json::Value) -> FaultSpec {
        serde_json::from_value(v).unwrap()
    }

    fn compile(s: &FaultSpec, topo: &Topology) -> Result<CompiledFault, FaultError> {
        compile_fault(s, topo, "faults[0]", &mut SeedTree::new(1).rng(Concern::Faults))
    }

    #[test]
    fn fraction_edges() {
        let zero = UserScope::Fraction {
            fraction: 0.0,
            salt: "s".into(),
        };
        let one = UserScope::Fraction {
            fraction: 1.0,
            salt: "s".into(),
        };
        assert!((0..10_000).all(|u| !scope_match(u, &zero) && scope_match(u, &one)));
    }

    #[test]
    fn template_names_parse_as_kinds() {
        let s = spec(json!({
            "kind": "chaos-kong",
            "target": {"region": "us-east-1"},
            "window": {"start_ms": 0, "duration_ms": 1000}
        }));
        assert_eq!(s.kind, FaultKindName::RegionOutage);
        let topo = fixtures::load("three-region").unwrap();
        let c = compile(&s, &topo).unwrap();
        assert_eq!(
            c.action,
            FaultAction::Outage {
                region: 0,
                mode: OutageMode::Evacuate
            }
        );
    }

    #[test]
    fn physical_fault_rejects_user_scope() {
        let topo = fixtures::load("three-region").unwrap();
        let s = spec(json!({
            "kind": "terminate-instance",
            "target": {"service": "api"},
            "scope": {"mode": "fraction", "fraction": 0.05, "salt": "g"},
            "window": {"start_ms": 0, "duration_ms": 1000}
        }));
        assert!(matches!(compile(&s, &topo), Err(FaultError::ScopeMismatch { .. })));
    }

    #[test]
    fn target_errors_name_the_path() {
        let topo = fixtures::load("three-region").unwrap();
        let s = spec(json!({
            "kind": "fail-service",
            "target": {"service": "ghost"},
            "window": {"start_ms": 0, "duration_ms": 1000}
        }));
        assert_eq!(compile(&s, &topo).unwrap_err().path(), Some("faults[0].target.service"));
        let s = spec(json!({
            "kind": "fail-service",
            "target": {"region": "us-east-1"},
            "window": {"start_ms": 0, "duration_ms": 1000}
        }));
        assert!(matches!(compile(&s, &topo), Err(FaultError::TargetMismatch { .. })));
        let s = spec(json!({
            "kind": "inject-latency",
            "target": {"edge": {"caller": "api", "callee": "api"}},
            "window": {"start_ms": 0, "duration_ms": 1000}
        }));
        assert!(compile(&s, &topo).is_err());
    }

    #[test]
    fn fail_service_is_certain_failure_on_every_inbound_call() {
        let topo = fixtures::load("bookmark-fallback").unwrap();
        let s = spec(json!({
            "kind": "fail-service",
            "target": {"service": "bookmark"},
            "window": {"start_ms": 1000, "duration_ms": 1000}
        }));
        let c = compile(&s, &topo).unwrap();
        let bm = topo.service_idx("bookmark").unwrap();
        assert_eq!(
            c.action,
            FaultAction::Fail {
                probability: 1.0,
                limit: None
            }
        );
        assert!(c.intercepts(SimTime::from_millis(1500), Some(0), bm, 7));
        assert!(c.intercepts(SimTime::from_millis(1500), None, bm, 7));
        assert!(!c.intercepts(SimTime::from_millis(2000), Some(0), bm, 7));
        assert!(!c.intercepts(SimTime::from_millis(999), Some(0), bm, 7));
    }

    #[test]
    fn catalog_has_five_templates_that_compile() {
        let cat = builtin_catalog();
        assert_eq!(cat.len(), 5);
        let kong = cat.iter().find(|t| t.name == "chaos-kong").unwrap();
        assert_eq!(kong.mode, Some(OutageMode::Evacuate));
        let topo = fixtures::load("three-region").unwrap();
        let window = FaultWindow {
            start_ms: 0,
            duration_ms: 60_000,
        };
        for t in &cat {
            let target = match t.kind {
                FaultKindName::TerminateInstance | FaultKindName::FailService => FaultTarget::Service("api".into()),
                FaultKindName::InjectLatency | FaultKindName::FailRequests => FaultTarget::Edge(EdgeRef {
                    caller: "api".into(),
                    callee: "bookmark".into(),
                }),
                FaultKindName::RegionOutage => FaultTarget::Region("eu-west-1".into()),
            };
            compile(&t.instantiate(target, UserScope::All, window), &topo).unwrap();
        }
    }

    #[test]
    fn pinned_instance_parses() {
        let topo = fixtures::load("three-region").unwrap();
        let s = spec(json!({
            "kind": "terminate-instance",
            "target": {"instance": "api/us-west-2/1"},
            "window": {"start_ms": 0, "duration_ms": 1}
        }));
        assert_eq!(
            compile(&s, &topo).unwrap().action,
            FaultAction::Terminate(InstanceId {
                service: 0,
                region: 1,
                index: 1
            })
        );
        let bad = FaultSpec {
            target: FaultTarget::Instance("api/us-west-2/99".into()),
            ..s
        };
        assert!(compile(&bad, &topo).is_err());
    }
}

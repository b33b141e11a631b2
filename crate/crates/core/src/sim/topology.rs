//! Topology documents: services, regions, call edges and traffic shape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("dangling reference at `{path}`: `{name}` does not exist")]
    Dangling { path: String, name: String },
}

impl TopologyError {
    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        TopologyError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Document path of the offending field, when there is one.
    pub fn path(&self) -> Option<&str> {
        match self {
            TopologyError::Schema { path, .. } | TopologyError::Dangling { path, .. } => Some(path),
            TopologyError::Cycle(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criticality {
    #[default]
    Critical,
    Degradable,
}

/// What a caller does when a call to this service fails.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    #[default]
    None,
    /// Serve a reasonable default; the request succeeds in degraded mode.
    DefaultValue,
    /// Reissue the call directly against another service.
    BypassTo(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueuePolicy {
    Bounded(u32),
    Unbounded,
}

impl Default for QueuePolicy {
    fn default() -> Self {
        QueuePolicy::Bounded(1000)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSpec {
    /// Entry lifetime in simulated seconds.
    pub ttl_s: f64,
    /// Store error responses as well as successes.
    #[serde(default)]
    pub cache_errors: bool,
}

fn default_jitter() -> f64 {
    0.1
}
fn default_memory_limit() -> u64 {
    100_000
}
fn default_instances() -> u32 {
    1
}
fn default_weight() -> f64 {
    1.0
}

/// One microservice. Every region runs `instances_per_region` copies.
///
/// An instance admits calls into a FIFO queue and starts at most
/// `capacity_per_instance` of them per second. A started call holds one of
/// the instance's `max_in_flight` slots (unlimited when absent) until its
/// own latency and all of its synchronous downstream calls have finished.
/// Local latency is `base_latency_ms * jitter * (1 + queue_len / capacity)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub id: String,
    #[serde(default)]
    pub criticality: Criticality,
    #[serde(default)]
    pub fallback: Fallback,
    /// Requests per second one instance can start.
    pub capacity_per_instance: f64,
    pub base_latency_ms: f64,
    /// Uniform relative jitter applied to the base latency, in `[0, 1)`.
    #[serde(default = "default_jitter")]
    pub latency_jitter: f64,
    #[serde(default)]
    pub queue: QueuePolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<u32>,
    /// Queue length beyond which the instance runs out of memory and dies.
    #[serde(default = "default_memory_limit")]
    pub memory_limit: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<CacheSpec>,
    #[serde(default = "default_instances")]
    pub instances_per_region: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub id: String,
    #[serde(default = "default_weight")]
    pub routing_weight: f64,
    #[serde(default)]
    pub evacuated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CallKind {
    #[serde(alias = "required")]
    RequiredForSuccess,
    Degradable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub caller: String,
    pub callee: String,
    pub kind: CallKind,
}

fn default_amplitude() -> f64 {
    0.5
}
fn default_keys() -> u32 {
    1000
}

/// Diurnal user demand: `base_rate * (1 + amplitude * sin(2π(t - phase)/day))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSpec {
    /// Mean stream-start attempts per second.
    pub base_rate: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Phase offset in seconds.
    #[serde(default)]
    pub phase_s: f64,
    /// Users are drawn uniformly from `0..population`.
    pub population: u64,
    /// Distinct content keys requests are spread over (used by caches).
    #[serde(default = "default_keys")]
    pub keys: u32,
}

/// Serialized form of a topology, as stored in config files and reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyDoc {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    pub entry_service: String,
    pub regions: Vec<RegionSpec>,
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
    pub traffic: TrafficSpec,
}

/// Resolved callee of an edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Call {
    pub callee: usize,
    pub kind: CallKind,
}

/// Validated topology with index lookups.
#[derive(Clone, Debug)]
pub struct Topology {
    doc: TopologyDoc,
    version: u64,
    service_index: BTreeMap<String, usize>,
    region_index: BTreeMap<String, usize>,
    calls: Vec<Vec<Call>>,
    bypass: Vec<Option<usize>>,
    entry: usize,
}

/// Parses and validates a topology document (JSON text).
pub fn load_topology(text: &str) -> Result<Topology, TopologyError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: TopologyDoc = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        TopologyError::schema(path, e.into_inner().to_string())
    })?;
    Topology::from_doc(doc)
}

/// Same as [`load_topology`] for an already-parsed JSON value.
pub fn load_topology_value(value: &serde_json::Value) -> Result<Topology, TopologyError> {
    let doc: TopologyDoc = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        TopologyError::schema(path, e.into_inner().to_string())
    })?;
    Topology::from_doc(doc)
}

impl Topology {
    pub fn from_doc(doc: TopologyDoc) -> Result<Self, TopologyError> {
        let version = doc.version.unwrap_or(1);
        if version == 0 {
            return Err(TopologyError::schema("version", "must be >= 1"));
        }
        if doc.services.is_empty() {
            return Err(TopologyError::schema("services", "at least one service is required"));
        }
        if doc.regions.is_empty() {
            return Err(TopologyError::schema("regions", "at least one region is required"));
        }

        let mut service_index = BTreeMap::new();
        for (i, s) in doc.services.iter().enumerate() {
            let p = |f: &str| format!("services[{i}].{f}");
            if s.id.is_empty() {
                return Err(TopologyError::schema(p("id"), "must not be empty"));
            }
            if service_index.insert(s.id.clone(), i).is_some() {
                return Err(TopologyError::schema(p("id"), format!("duplicate service `{}`", s.id)));
            }
            if !(s.capacity_per_instance.is_finite() && s.capacity_per_instance > 0.0) {
                return Err(TopologyError::schema(p("capacity_per_instance"), "must be > 0"));
            }
            if !(s.base_latency_ms.is_finite() && s.base_latency_ms >= 0.0) {
                return Err(TopologyError::schema(p("base_latency_ms"), "must be >= 0"));
            }
            if !(0.0..1.0).contains(&s.latency_jitter) {
                return Err(TopologyError::schema(p("latency_jitter"), "must be in [0, 1)"));
            }
            if let QueuePolicy::Bounded(0) = s.queue {
                return Err(TopologyError::schema(p("queue.bounded"), "bounded queue max must be >= 1"));
            }
            if s.max_in_flight == Some(0) {
                return Err(TopologyError::schema(p("max_in_flight"), "must be >= 1"));
            }
            if s.memory_limit == 0 {
                return Err(TopologyError::schema(p("memory_limit"), "must be >= 1"));
            }
            if s.instances_per_region == 0 {
                return Err(TopologyError::schema(
                    p("instances_per_region"),
                    "every region must host at least one instance",
                ));
            }
            if let Some(c) = &s.cache {
                if !(c.ttl_s.is_finite() && c.ttl_s > 0.0) {
                    return Err(TopologyError::schema(p("cache.ttl_s"), "must be > 0"));
                }
            }
        }

        let mut bypass = vec![None; doc.services.len()];
        for (i, s) in doc.services.iter().enumerate() {
            if let Fallback::BypassTo(target) = &s.fallback {
                let path = format!("services[{i}].fallback.bypass-to");
                if target == &s.id {
                    return Err(TopologyError::schema(path, "a service cannot bypass to itself"));
                }
                let t = *service_index.get(target).ok_or_else(|| TopologyError::Dangling {
                    path,
                    name: target.clone(),
                })?;
                bypass[i] = Some(t);
            }
        }

        let mut region_index = BTreeMap::new();
        for (i, r) in doc.regions.iter().enumerate() {
            if region_index.insert(r.id.clone(), i).is_some() {
                return Err(TopologyError::schema(
                    format!("regions[{i}].id"),
                    format!("duplicate region `{}`", r.id),
                ));
            }
            if !(r.routing_weight.is_finite() && r.routing_weight >= 0.0) {
                return Err(TopologyError::schema(format!("regions[{i}].routing_weight"), "must be >= 0"));
            }
        }
        if !doc.regions.iter().any(|r| !r.evacuated && r.routing_weight > 0.0) {
            return Err(TopologyError::schema(
                "regions",
                "at least one non-evacuated region needs routing_weight > 0",
            ));
        }

        let entry = *service_index
            .get(&doc.entry_service)
            .ok_or_else(|| TopologyError::Dangling {
                path: "entry_service".into(),
                name: doc.entry_service.clone(),
            })?;

        let mut calls = vec![Vec::new(); doc.services.len()];
        for (i, e) in doc.edges.iter().enumerate() {
            let caller = *service_index.get(&e.caller).ok_or_else(|| TopologyError::Dangling {
                path: format!("edges[{i}].caller"),
                name: e.caller.clone(),
            })?;
            let callee = *service_index.get(&e.callee).ok_or_else(|| TopologyError::Dangling {
                path: format!("edges[{i}].callee"),
                name: e.callee.clone(),
            })?;
            calls[caller].push(Call { callee, kind: e.kind });
        }

        let t = &doc.traffic;
        if !(t.base_rate.is_finite() && t.base_rate > 0.0) {
            return Err(TopologyError::schema("traffic.base_rate", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&t.amplitude) {
            return Err(TopologyError::schema("traffic.amplitude", "must be in [0, 1]"));
        }
        if !t.phase_s.is_finite() {
            return Err(TopologyError::schema("traffic.phase_s", "must be finite"));
        }
        if t.population == 0 {
            return Err(TopologyError::schema("traffic.population", "must be >= 1"));
        }
        if t.keys == 0 {
            return Err(TopologyError::schema("traffic.keys", "must be >= 1"));
        }

        let topo = Topology {
            doc,
            version,
            service_index,
            region_index,
            calls,
            bypass,
            entry,
        };
        if let Some(cycle) = topo.find_cycle() {
            return Err(TopologyError::Cycle(cycle));
        }
        Ok(topo)
    }

    /// Call graph successors including the implicit caller -> bypass-target
    /// edges that fallbacks can create.
    fn successors(&self, s: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for c in &self.calls[s] {
            out.push(c.callee);
            if let Some(t) = self.bypass[c.callee] {
                out.push(t);
            }
        }
        out
    }

    fn find_cycle(&self) -> Option<Vec<String>> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let n = self.doc.services.len();
        let mut state = vec![0u8; n];
        let mut stack: Vec<usize> = Vec::new();
        for start in 0..n {
            if state[start] == 0 {
                if let Some(c) = self.dfs(start, &mut state, &mut stack) {
                    return Some(c.into_iter().map(|i| self.doc.services[i].id.clone()).collect());
                }
            }
        }
        None
    }

    fn dfs(&self, s: usize, state: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        state[s] = 1;
        stack.push(s);
        for t in self.successors(s) {
            match state[t] {
                0 => {
                    if let Some(c) = self.dfs(t, state, stack) {
                        return Some(c);
                    }
                }
                1 => {
                    let pos = stack.iter().position(|&x| x == t).unwrap_or(0);
                    let mut cycle = stack[pos..].to_vec();
                    cycle.push(t);
                    return Some(cycle);
                }
                _ => {}
            }
        }
        stack.pop();
        state[s] = 2;
        None
    }

    pub fn doc(&self) -> &TopologyDoc {
        &self.doc
    }

    /// Serialized document with the current version stamped in.
    pub fn to_doc(&self) -> TopologyDoc {
        let mut d = self.doc.clone();
        d.version = Some(self.version);
        d
    }

    pub fn name(&self) -> &str {
        &self.doc.name
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn services(&self) -> &[ServiceSpec] {
        &self.doc.services
    }

    pub fn regions(&self) -> &[RegionSpec] {
        &self.doc.regions
    }

    pub fn traffic(&self) -> &TrafficSpec {
        &self.doc.traffic
    }

    pub fn entry(&self) -> usize {
        self.entry
    }

    pub fn service_idx(&self, id: &str) -> Option<usize> {
        self.service_index.get(id).copied()
    }

    pub fn region_idx(&self, id: &str) -> Option<usize> {
        self.region_index.get(id).copied()
    }

    pub fn calls(&self, service: usize) -> &[Call] {
        &self.calls[service]
    }

    pub fn bypass_target(&self, service: usize) -> Option<usize> {
        self.bypass[service]
    }

    /// Whether `caller -> callee` is a declared edge.
    pub fn has_edge(&self, caller: usize, callee: usize) -> bool {
        self.calls[caller].iter().any(|c| c.callee == callee)
    }

    /// Length (in services) of the longest call chain from the entry.
    pub fn max_call_depth(&self) -> usize {
        fn depth(t: &Topology, s: usize, memo: &mut Vec<Option<usize>>) -> usize {
            if let Some(d) = memo[s] {
                return d;
            }
            let d = 1 + t.successors(s).into_iter().map(|c| depth(t, c, memo)).max().unwrap_or(0);
            memo[s] = Some(d);
            d
        }
        let mut memo = vec![None; self.doc.services.len()];
        depth(self, self.entry, &mut memo)
    }

    /// Changes a region's routing weight; bumps the version.
    pub fn set_routing_weight(&mut self, region: usize, weight: f64) -> Result<(), TopologyError> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(TopologyError::schema(format!("regions[{region}].routing_weight"), "must be >= 0"));
        }
        self.doc.regions[region].routing_weight = weight;
        self.version += 1;
        Ok(())
    }

    /// Replaces a service definition after re-validating the whole
    /// topology; bumps the version on success.
    pub fn update_service(&mut self, spec: ServiceSpec) -> Result<(), TopologyError> {
        let idx = self
            .service_idx(&spec.id)
            .ok_or_else(|| TopologyError::Dangling { path: "services".into(), name: spec.id.clone() })?;
        let mut doc = self.doc.clone();
        doc.services[idx] = spec;
        doc.version = Some(self.version + 1);
        *self = Topology::from_doc(doc)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> serde_json::Value {
        json!({
            "name": "t",
            "entry_service": "api",
            "regions": [{"id": "r1"}],
            "services": [
                {"id": "api", "capacity_per_instance": 100.0, "base_latency_ms": 5.0},
                {"id": "db", "capacity_per_instance": 100.0, "base_latency_ms": 5.0}
            ],
            "edges": [{"caller": "api", "callee": "db", "kind": "required-for-success"}],
            "traffic": {"base_rate": 10.0, "population": 100}
        })
    }

    #[test]
    fn loads_minimal_doc_with_version_one() {
        let t = load_topology_value(&base()).unwrap();
        assert_eq!(t.version(), 1);
        assert_eq!(t.entry(), 0);
        assert_eq!(t.calls(0), &[Call { callee: 1, kind: CallKind::RequiredForSuccess }]);
        assert_eq!(t.max_call_depth(), 2);
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let mut d = base();
        d["edges"] = json!([{"caller": "api", "callee": "api", "kind": "degradable"}]);
        assert_eq!(
            load_topology_value(&d).unwrap_err(),
            TopologyError::Cycle(vec!["api".into(), "api".into()])
        );
    }

    #[test]
    fn longer_cycle_is_listed() {
        let mut d = base();
        d["edges"] = json!([
            {"caller": "api", "callee": "db", "kind": "required"},
            {"caller": "db", "callee": "api", "kind": "required"}
        ]);
        let err = load_topology_value(&d).unwrap_err();
        assert_eq!(err, TopologyError::Cycle(vec!["api".into(), "db".into(), "api".into()]));
        assert_eq!(err.to_string(), "dependency cycle: api -> db -> api");
    }

    #[test]
    fn bypass_to_missing_service_dangles() {
        let mut d = base();
        d["services"][1]["fallback"] = json!({"bypass-to": "nonexistent"});
        let err = load_topology_value(&d).unwrap_err();
        assert!(matches!(err, TopologyError::Dangling { ref name, .. } if name == "nonexistent"));
        assert_eq!(err.path(), Some("services[1].fallback.bypass-to"));
    }

    #[test]
    fn bypass_edges_take_part_in_cycle_detection() {
        // api -> cache, cache falls back to origin, origin calls api.
        let d = json!({
            "entry_service": "api",
            "regions": [{"id": "r1"}],
            "services": [
                {"id": "api", "capacity_per_instance": 1.0, "base_latency_ms": 1.0},
                {"id": "cache", "capacity_per_instance": 1.0, "base_latency_ms": 1.0,
                 "fallback": {"bypass-to": "origin"}},
                {"id": "origin", "capacity_per_instance": 1.0, "base_latency_ms": 1.0}
            ],
            "edges": [
                {"caller": "api", "callee": "cache", "kind": "required"},
                {"caller": "origin", "callee": "api", "kind": "required"}
            ],
            "traffic": {"base_rate": 1.0, "population": 1}
        });
        assert!(matches!(load_topology_value(&d), Err(TopologyError::Cycle(_))));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let mut d = base();
        d["services"][1]["capacity_per_instance"] = json!(0.0);
        assert_eq!(
            load_topology_value(&d).unwrap_err().path(),
            Some("services[1].capacity_per_instance")
        );

        let mut d = base();
        d["services"][0]["queue"] = json!({"bounded": 0});
        assert_eq!(load_topology_value(&d).unwrap_err().path(), Some("services[0].queue.bounded"));

        let mut d = base();
        d["services"][0].as_object_mut().unwrap().remove("base_latency_ms");
        let err = load_topology(&d.to_string()).unwrap_err();
        assert_eq!(err.path(), Some("services[0]"));

        let mut d = base();
        d["entry_service"] = json!("nope");
        assert_eq!(load_topology_value(&d).unwrap_err().path(), Some("entry_service"));

        let mut d = base();
        d["edges"][0]["callee"] = json!("ghost");
        assert_eq!(load_topology_value(&d).unwrap_err().path(), Some("edges[0].callee"));
    }

    #[test]
    fn needs_a_routable_region() {
        let mut d = base();
        d["regions"] = json!([{"id": "r1", "evacuated": true}]);
        assert_eq!(load_topology_value(&d).unwrap_err().path(), Some("regions"));
    }

    #[test]
    fn config_changes_bump_version() {
        let mut t = load_topology_value(&base()).unwrap();
        t.set_routing_weight(0, 2.0).unwrap();
        assert_eq!(t.version(), 2);
        let mut s = t.services()[1].clone();
        s.base_latency_ms = 9.0;
        t.update_service(s).unwrap();
        assert_eq!(t.version(), 3);
        assert_eq!(t.to_doc().version, Some(3));
    }
}

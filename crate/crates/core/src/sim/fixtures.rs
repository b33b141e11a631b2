//! Topologies shipped with the crate.

use super::topology::{load_topology, Topology, TopologyError};

/// Fixture names, in listing order.
pub const NAMES: [&str; 5] = [
    "bookmark-fallback",
    "cache-poisoning",
    "unbounded-queue",
    "three-region",
    "cache-bypass",
];

/// Raw JSON of a fixture.
pub fn source(name: &str) -> Option<&'static str> {
    Some(match name {
        "bookmark-fallback" => include_str!("../../fixtures/bookmark-fallback.json"),
        "cache-poisoning" => include_str!("../../fixtures/cache-poisoning.json"),
        "unbounded-queue" => include_str!("../../fixtures/unbounded-queue.json"),
        "three-region" => include_str!("../../fixtures/three-region.json"),
        "cache-bypass" => include_str!("../../fixtures/cache-bypass.json"),
        _ => return None,
    })
}

/// Parses a fixture; `None` for an unknown name.
pub fn load(name: &str) -> Option<Topology> {
    source(name).map(|s| load_topology(s).expect("shipped fixtures are valid"))
}

/// Like [`load`] but reports unknown names as a dangling reference.
pub fn try_load(name: &str) -> Result<Topology, TopologyError> {
    load(name).ok_or_else(|| TopologyError::Dangling {
        path: "topology".into(),
        name: name.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Criticality, Fallback};

    #[test]
    fn every_fixture_loads() {
        for n in NAMES {
            let t = load(n).unwrap();
            assert_eq!(t.name(), n);
            assert_eq!(t.version(), 1);
        }
        assert!(load("nope").is_none());
    }

    #[test]
    fn bookmark_is_degradable_with_default_value() {
        let t = load("bookmark-fallback").unwrap();
        let b = &t.services()[t.service_idx("bookmark").unwrap()];
        assert_eq!(b.criticality, Criticality::Degradable);
        assert_eq!(b.fallback, Fallback::DefaultValue);
        assert_eq!(t.regions().len(), 3);
    }
}

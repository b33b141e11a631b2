//! Deterministic discrete-event simulator of a multi-region service graph.

mod arrivals;
pub mod fixtures;
mod routing;
mod time;
mod topology;
mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use arrivals::{expected_arrivals, rate_at, Arrival, ArrivalProcess, DAY_S};
pub use routing::Router;
pub use time::SimTime;
pub use topology::{
    load_topology, load_topology_value, CacheSpec, Call, CallKind, Criticality, EdgeSpec, Fallback, QueuePolicy,
    RegionSpec, ServiceSpec, Topology, TopologyDoc, TopologyError, TrafficSpec,
};
pub use world::{BoundaryRecord, CallRecord, DeathRecord, FaultFiring, Trace, World, WorldOptions};

use crate::faults::FaultError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("all regions are down")]
    AllRegionsDown,
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error(transparent)]
    Fault(#[from] FaultError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    /// A fault interceptor failed the call.
    Injected,
    /// Bounded queue was full.
    Rejected,
    /// No live instance in the routed region.
    NoInstance,
    /// The instance handling the call died.
    InstanceDied,
    /// The routed region is blackholed.
    RegionDown,
    /// No region accepts traffic.
    AllRegionsDown,
    /// A required dependency failed with no usable fallback.
    Dependency,
}

/// Result of a call or of a whole stream-start attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum Outcome {
    Success,
    /// Succeeded through a fallback. `degraded` is set when a default value
    /// stood in for real data (e.g. playback starts from the beginning).
    Fallback { degraded: bool },
    Failure { reason: FailureReason },
}

impl Outcome {
    pub fn failure(reason: FailureReason) -> Self {
        Outcome::Failure { reason }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, Outcome::Failure { .. })
    }

    /// Success or fallback success: counts toward SPS.
    pub fn is_start(&self) -> bool {
        !self.is_failure()
    }
}

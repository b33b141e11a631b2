//! Chaos experiments against a deterministic simulated service graph.
//!
//! The [`sim`] module is the system under test: a multi-region graph of
//! services with queues, caches and fallbacks, driven by diurnal user
//! traffic. [`faults`] injects real-world events into it, [`metrics`]
//! observes stream starts per second at the boundary plus per-service
//! health signals, [`experiment`] runs the control/experiment procedure
//! and judges the outcome, and [`scheduler`] reruns experiments on a
//! cadence while tracking which results are stale.

pub mod experiment;
pub mod faults;
pub mod hashing;
pub mod metrics;
pub mod scheduler;
pub mod sim;

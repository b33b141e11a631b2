//! The event loop.
//!
//! Calls run synchronously down the dependency graph: a service finishes
//! its local work, then calls its dependencies one at a time in edge
//! declaration order, then answers its caller. All calls of a request stay
//! inside the region the user was routed to.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arrivals::{Arrival, ArrivalProcess};
use super::routing::Router;
use super::time::SimTime;
use super::topology::{CallKind, Criticality, Fallback, QueuePolicy, Topology};
use super::{FailureReason, Outcome, SimError};
use crate::faults::{compile_fault, CompiledFault, FaultAction, FaultError, FaultSpec, InstanceId, OutageMode};
use crate::hashing::{hash3, unit, Concern, SeedTree};
use crate::metrics::{MetricSink, OutcomeEvent, DEFAULT_WINDOW_S};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldOptions {
    pub window: SimTime,
    /// Keep per-call, per-request and fault-firing records.
    pub trace: bool,
}

impl Default for WorldOptions {
    fn default() -> Self {
        Self {
            window: SimTime::from_secs_f64(DEFAULT_WINDOW_S),
            trace: false,
        }
    }
}

/// A fault interceptor acting on one call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultFiring {
    pub time: SimTime,
    pub fault: usize,
    pub user: u64,
    pub request: u64,
    pub service: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub time: SimTime,
    pub request: u64,
    pub user: u64,
    pub service: usize,
    pub caller: Option<usize>,
    pub latency_ms: f64,
    pub outcome: Outcome,
    pub cache_hit: bool,
}

/// Final outcome of one stream-start attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    pub time: SimTime,
    pub request: u64,
    pub user: u64,
    pub region: Option<usize>,
    pub latency_ms: f64,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeathRecord {
    pub time: SimTime,
    pub instance: InstanceId,
    /// Queue length when the instance died.
    pub queue_len: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub firings: Vec<FaultFiring>,
    pub calls: Vec<CallRecord>,
    pub boundary: Vec<BoundaryRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct FrameRef {
    idx: u32,
    gen: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Root,
    /// Dependency call for edge `calls[parent.service][i]`.
    Child(usize),
    /// Fallback reissue replacing the failed dependency call `i`.
    Bypass(usize),
}

#[derive(Clone, Copy, Debug)]
struct Frame {
    gen: u32,
    live: bool,
    request: u64,
    user: u64,
    key: u32,
    region: u16,
    service: u16,
    caller: Option<u16>,
    attempt: u8,
    parent: Option<FrameRef>,
    role: Role,
    issued_at: SimTime,
    instance: Option<u32>,
    holds_slot: bool,
    next_child: u16,
    fallback: bool,
    degraded: bool,
    cache_miss: bool,
    cached: Option<Outcome>,
}

#[derive(Clone, Debug)]
struct Instance {
    id: InstanceId,
    alive: bool,
    dying: bool,
    queue: VecDeque<FrameRef>,
    next_free: SimTime,
    in_flight: u32,
    dispatch_pending: bool,
}

#[derive(Clone, Copy, Debug)]
enum Ev {
    CallArrive(FrameRef),
    Dispatch(u32),
    LocalDone(FrameRef),
    Respond(FrameRef),
    InstanceDeath(u32),
    FaultActivate(usize),
    FaultRevert(usize),
}

#[derive(Clone, Copy, Debug)]
struct Scheduled {
    time: SimTime,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(o.time, o.seq))
    }
}

#[derive(Clone, Copy, Debug)]
struct CacheEntry {
    outcome: Outcome,
    expires: SimTime,
}

#[derive(Clone, Debug)]
struct FaultState {
    compiled: CompiledFault,
    active: bool,
    cancelled: bool,
    fired: u64,
}

/// Whole simulated system: topology, instances, event queue, faults and
/// the metric sink.
#[derive(Clone, Debug)]
pub struct World {
    topo: Topology,
    seeds: SeedTree,
    opts: WorldOptions,
    clock: SimTime,
    router: Router,
    base_weights: Vec<f64>,
    evacuations: Vec<u32>,
    blackholes: Vec<u32>,
    arrivals: ArrivalProcess,
    pending: Vec<Arrival>,
    cursor: usize,
    generated_until: SimTime,
    next_request: u64,
    jitter_seed: u64,
    fault_rng: ChaCha8Rng,
    faults: Vec<FaultState>,
    call_faults: Vec<usize>,
    heap: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    instances: Vec<Instance>,
    /// First instance index of `(service, region)` at `service * regions + region`.
    inst_base: Vec<u32>,
    rr: Vec<u32>,
    slot_us: Vec<u64>,
    caches: Vec<HashMap<(u16, u32), CacheEntry>>,
    frames: Vec<Frame>,
    free: Vec<u32>,
    sink: MetricSink,
    trace: Option<Trace>,
    deaths: Vec<DeathRecord>,
    region_entries: Vec<u64>,
}

impl World {
    /// Builds a world at time zero with `faults` compiled and scheduled.
    pub fn new(topo: Topology, seed: u64, faults: &[FaultSpec], opts: WorldOptions) -> Result<World, SimError> {
        let seeds = SeedTree::new(seed);
        let nreg = topo.regions().len();
        let region_ids: Vec<&str> = topo.regions().iter().map(|r| r.id.as_str()).collect();
        let base_weights: Vec<f64> = topo
            .regions()
            .iter()
            .map(|r| if r.evacuated { 0.0 } else { r.routing_weight })
            .collect();
        let router = Router::new(seeds.seed(Concern::Routing), &region_ids, base_weights.clone());

        let mut instances = Vec::new();
        let mut inst_base = Vec::new();
        for (s, spec) in topo.services().iter().enumerate() {
            for r in 0..nreg {
                inst_base.push(instances.len() as u32);
                for index in 0..spec.instances_per_region {
                    instances.push(Instance {
                        id: InstanceId { service: s, region: r, index },
                        alive: true,
                        dying: false,
                        queue: VecDeque::new(),
                        next_free: SimTime::ZERO,
                        in_flight: 0,
                        dispatch_pending: false,
                    });
                }
            }
        }
        let services: Vec<String> = topo.services().iter().map(|s| s.id.clone()).collect();
        let totals = topo.services().iter().map(|s| s.instances_per_region * nreg as u32).collect();
        let slot_us = topo
            .services()
            .iter()
            .map(|s| ((1e6 / s.capacity_per_instance).round() as u64).max(1))
            .collect();

        let mut fault_rng = seeds.rng(Concern::Faults);
        let mut compiled = Vec::with_capacity(faults.len());
        for (i, f) in faults.iter().enumerate() {
            compiled.push(compile_fault(f, &topo, &format!("faults[{i}]"), &mut fault_rng)?);
        }
        // Refuse drills that would evacuate every region at once.
        let mut weights = base_weights.clone();
        for c in &compiled {
            if let FaultAction::Outage {
                region,
                mode: OutageMode::Evacuate,
            } = c.action
            {
                weights[region] = 0.0;
            }
        }
        if base_weights.iter().any(|&w| w > 0.0) && weights.iter().all(|&w| w <= 0.0) {
            return Err(FaultError::AllRegionsDown.into());
        }

        let mut world = World {
            arrivals: ArrivalProcess::new(*topo.traffic(), seeds.rng(Concern::Arrivals)),
            jitter_seed: seeds.seed(Concern::Jitter),
            sink: MetricSink::new(opts.window, services, totals),
            caches: vec![HashMap::new(); topo.services().len()],
            rr: vec![0; inst_base.len()],
            region_entries: vec![0; nreg],
            evacuations: vec![0; nreg],
            blackholes: vec![0; nreg],
            trace: opts.trace.then(Trace::default),
            topo,
            seeds,
            opts,
            clock: SimTime::ZERO,
            router,
            base_weights,
            pending: Vec::new(),
            cursor: 0,
            generated_until: SimTime::ZERO,
            next_request: 0,
            fault_rng,
            faults: Vec::new(),
            call_faults: Vec::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            instances,
            inst_base,
            slot_us,
            frames: Vec::new(),
            free: Vec::new(),
            deaths: Vec::new(),
        };
        for (i, c) in compiled.into_iter().enumerate() {
            world.schedule(c.start, Ev::FaultActivate(i));
            world.schedule(c.end, Ev::FaultRevert(i));
            world.faults.push(FaultState {
                compiled: c,
                active: false,
                cancelled: false,
                fired: 0,
            });
        }
        Ok(world)
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn seeds(&self) -> SeedTree {
        self.seeds
    }

    pub fn options(&self) -> WorldOptions {
        self.opts
    }

    pub fn sink(&self) -> &MetricSink {
        &self.sink
    }

    pub fn sink_mut(&mut self) -> &mut MetricSink {
        &mut self.sink
    }

    pub fn into_sink(self) -> MetricSink {
        self.sink
    }

    pub fn trace(&self) -> Option<&Trace> {
        self.trace.as_ref()
    }

    pub fn deaths(&self) -> &[DeathRecord] {
        &self.deaths
    }

    pub fn faults(&self) -> impl Iterator<Item = &CompiledFault> {
        self.faults.iter().map(|f| &f.compiled)
    }

    /// Number of times fault `i` intercepted a call.
    pub fn fault_fired(&self, i: usize) -> u64 {
        self.faults[i].fired
    }

    /// Stream-start attempts routed to each region so far.
    pub fn region_entries(&self) -> &[u64] {
        &self.region_entries
    }

    pub fn instance_alive(&self, id: InstanceId) -> bool {
        self.instance_index(id).is_some_and(|i| self.instances[i as usize].alive)
    }

    /// Current queue length of an instance (its memory proxy).
    pub fn queue_len(&self, id: InstanceId) -> Option<usize> {
        self.instance_index(id).map(|i| self.instances[i as usize].queue.len())
    }

    fn instance_index(&self, id: InstanceId) -> Option<u32> {
        let spec = self.topo.services().get(id.service)?;
        if id.region >= self.topo.regions().len() || id.index >= spec.instances_per_region {
            return None;
        }
        Some(self.inst_base[id.service * self.topo.regions().len() + id.region] + id.index)
    }

    /// Sticky region for a user under the current weights.
    pub fn route_request(&self, user: u64) -> Result<usize, SimError> {
        self.router.route(user).ok_or(SimError::AllRegionsDown)
    }

    /// Applies a region outage immediately. Evacuating the last region that
    /// still takes traffic is refused.
    pub fn apply_region_outage(&mut self, mode: OutageMode, region: &str) -> Result<(), SimError> {
        let r = self
            .topo
            .region_idx(region)
            .ok_or_else(|| SimError::UnknownRegion(region.to_string()))?;
        if mode == OutageMode::Evacuate {
            let others = self.router.weights().iter().enumerate().any(|(i, &w)| i != r && w > 0.0);
            if !others {
                return Err(SimError::AllRegionsDown);
            }
        }
        self.outage(r, mode, true);
        Ok(())
    }

    /// Undoes [`World::apply_region_outage`].
    pub fn revert_region_outage(&mut self, mode: OutageMode, region: &str) -> Result<(), SimError> {
        let r = self
            .topo
            .region_idx(region)
            .ok_or_else(|| SimError::UnknownRegion(region.to_string()))?;
        self.outage(r, mode, false);
        Ok(())
    }

    fn outage(&mut self, r: usize, mode: OutageMode, on: bool) {
        let counter = match mode {
            OutageMode::Blackhole => &mut self.blackholes[r],
            OutageMode::Evacuate => &mut self.evacuations[r],
        };
        if on {
            *counter += 1;
        } else {
            *counter = counter.saturating_sub(1);
        }
        if mode == OutageMode::Evacuate {
            let w = if self.evacuations[r] > 0 { 0.0 } else { self.base_weights[r] };
            self.router.set_weight(r, w);
        }
    }

    /// Reverts every active fault and cancels the ones not yet started.
    /// Dead instances stay dead.
    pub fn deactivate_all_faults(&mut self) {
        for i in 0..self.faults.len() {
            if self.faults[i].active {
                self.revert_fault(i);
            }
            self.faults[i].cancelled = true;
        }
    }

    /// Processes every event with time `<= t_end` and closes every window
    /// that ends at or before `t_end`.
    pub fn run_until(&mut self, t_end: SimTime) {
        assert!(t_end >= self.clock, "time travel: {} < {}", t_end, self.clock);
        loop {
            while self.cursor == self.pending.len() && self.generated_until <= t_end {
                self.pending.clear();
                self.cursor = 0;
                let t0 = self.generated_until;
                let t1 = t0.plus(self.opts.window.micros());
                self.arrivals.fill(t0, t1, &mut self.pending);
                self.generated_until = t1;
            }
            let ta = self.pending.get(self.cursor).map(|a| a.time);
            let th = self.heap.peek().map(|e| e.0.time);
            let (t, arrival) = match (ta, th) {
                (Some(a), Some(h)) if a <= h => (a, true),
                (Some(a), None) => (a, true),
                (_, Some(h)) => (h, false),
                (None, None) => break,
            };
            if t > t_end {
                break;
            }
            self.close_windows_through(t);
            self.clock = t;
            if arrival {
                let a = self.pending[self.cursor];
                self.cursor += 1;
                self.on_arrival(a);
            } else {
                let Reverse(s) = self.heap.pop().expect("peeked");
                self.handle(s.ev);
            }
        }
        self.close_windows_through(t_end);
        self.clock = t_end;
    }

    fn close_windows_through(&mut self, t: SimTime) {
        while self.sink.open_window_end() <= t {
            let gauges = self.gauges();
            self.sink.close_window(&gauges);
        }
    }

    fn gauges(&self) -> Vec<(u64, u64)> {
        let mut g = vec![(0u64, 0u64); self.topo.services().len()];
        for inst in self.instances.iter().filter(|i| i.alive) {
            let q = inst.queue.len() as u64;
            let e = &mut g[inst.id.service];
            e.0 += q;
            e.1 = e.1.max(q);
        }
        g
    }

    /// SHA-256 over the closed metric windows, clock, instance states and
    /// fault counters.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self.sink.windows()).expect("windows serialize"));
        h.update(self.clock.micros().to_le_bytes());
        h.update(self.next_request.to_le_bytes());
        for i in &self.instances {
            h.update([u8::from(i.alive)]);
            h.update((i.queue.len() as u64).to_le_bytes());
            h.update(i.in_flight.to_le_bytes());
            h.update(i.next_free.micros().to_le_bytes());
        }
        for f in &self.faults {
            h.update(f.fired.to_le_bytes());
            h.update([u8::from(f.active)]);
        }
        h.update(serde_json::to_vec(&self.deaths).expect("deaths serialize"));
        hex::encode(h.finalize())
    }

    fn schedule(&mut self, time: SimTime, ev: Ev) {
        self.seq += 1;
        self.heap.push(Reverse(Scheduled { time, seq: self.seq, ev }));
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::CallArrive(fr) => {
                if self.frame(fr).is_some() {
                    self.arrive(fr);
                }
            }
            Ev::Dispatch(i) => {
                self.instances[i as usize].dispatch_pending = false;
                self.pump(i);
            }
            Ev::LocalDone(fr) => {
                let Some(f) = self.frame(fr) else { return };
                let inst = f.instance.expect("dispatched frame has an instance");
                if self.instances[inst as usize].alive {
                    self.advance(fr);
                } else {
                    self.finish(fr, Outcome::failure(FailureReason::InstanceDied));
                }
            }
            Ev::Respond(fr) => {
                let Some(f) = self.frame(fr) else { return };
                let outcome = f.cached.expect("cache hit carries an outcome");
                if outcome.is_failure() {
                    self.sink.record_cached_error(f.service as usize);
                }
                self.finish(fr, outcome);
            }
            Ev::InstanceDeath(i) => self.kill(i),
            Ev::FaultActivate(i) => {
                if !self.faults[i].cancelled {
                    self.activate_fault(i);
                }
            }
            Ev::FaultRevert(i) => {
                if self.faults[i].active {
                    self.revert_fault(i);
                }
            }
        }
    }

    fn activate_fault(&mut self, i: usize) {
        self.faults[i].active = true;
        let c = &self.faults[i].compiled;
        match c.action {
            FaultAction::Latency { .. } | FaultAction::Fail { .. } => self.call_faults.push(i),
            FaultAction::Terminate(id) => {
                if let Some(idx) = self.instance_index(id) {
                    self.schedule(self.clock, Ev::InstanceDeath(idx));
                }
            }
            FaultAction::Outage { region, mode } => {
                if mode == OutageMode::Evacuate {
                    let others = self.router.weights().iter().enumerate().any(|(r, &w)| r != region && w > 0.0);
                    if !others {
                        // Refused, like a manual evacuation of the last region.
                        self.faults[i].active = false;
                        return;
                    }
                }
                self.outage(region, mode, true);
            }
        }
    }

    fn revert_fault(&mut self, i: usize) {
        self.faults[i].active = false;
        match self.faults[i].compiled.action {
            FaultAction::Latency { .. } | FaultAction::Fail { .. } => self.call_faults.retain(|&f| f != i),
            FaultAction::Terminate(_) => {}
            FaultAction::Outage { region, mode } => self.outage(region, mode, false),
        }
    }

    fn on_arrival(&mut self, a: Arrival) {
        let request = self.next_request;
        self.next_request += 1;
        self.sink.record_arrival(a.user);
        let Some(region) = self.router.route(a.user) else {
            self.boundary(request, a.user, None, a.time, Outcome::failure(FailureReason::AllRegionsDown));
            return;
        };
        self.region_entries[region] += 1;
        let fr = self.alloc(Frame {
            gen: 0,
            live: true,
            request,
            user: a.user,
            key: a.key,
            region: region as u16,
            service: self.topo.entry() as u16,
            caller: None,
            attempt: 0,
            parent: None,
            role: Role::Root,
            issued_at: a.time,
            instance: None,
            holds_slot: false,
            next_child: 0,
            fallback: false,
            degraded: false,
            cache_miss: false,
            cached: None,
        });
        self.intercept(fr);
    }

    fn alloc(&mut self, mut f: Frame) -> FrameRef {
        match self.free.pop() {
            Some(idx) => {
                let slot = &mut self.frames[idx as usize];
                f.gen = slot.gen.wrapping_add(1);
                *slot = f;
                FrameRef { idx, gen: f.gen }
            }
            None => {
                self.frames.push(f);
                FrameRef {
                    idx: self.frames.len() as u32 - 1,
                    gen: 0,
                }
            }
        }
    }

    fn frame(&self, fr: FrameRef) -> Option<Frame> {
        let f = self.frames.get(fr.idx as usize)?;
        (f.live && f.gen == fr.gen).then_some(*f)
    }

    fn frame_mut(&mut self, fr: FrameRef) -> &mut Frame {
        let f = &mut self.frames[fr.idx as usize];
        debug_assert!(f.live && f.gen == fr.gen);
        f
    }

    /// Issues a dependency call from `parent` to `service`.
    fn call(&mut self, parent: FrameRef, service: usize, role: Role) {
        let p = self.frame(parent).expect("caller frame is live");
        let attempt = u8::from(matches!(role, Role::Bypass(_)));
        let fr = self.alloc(Frame {
            gen: 0,
            live: true,
            request: p.request,
            user: p.user,
            key: p.key,
            region: p.region,
            service: service as u16,
            caller: Some(p.service),
            attempt,
            parent: Some(parent),
            role,
            issued_at: self.clock,
            instance: None,
            holds_slot: false,
            next_child: 0,
            fallback: false,
            degraded: false,
            cache_miss: false,
            cached: None,
        });
        self.intercept(fr);
    }

    /// Runs active per-call faults, then delivers the call.
    fn intercept(&mut self, fr: FrameRef) {
        let f = self.frame(fr).expect("fresh frame");
        let caller = f.caller.map(usize::from);
        let service = f.service as usize;
        let mut delay = 0u64;
        let mut fail = false;
        for k in 0..self.call_faults.len() {
            let i = self.call_faults[k];
            let st = &self.faults[i];
            if !st.compiled.matcher.is_some_and(|m| m.matches(caller, service)) || !st.compiled.in_scope(f.user) {
                continue;
            }
            let fired = match st.compiled.action {
                FaultAction::Latency { extra_us, jitter_us } => {
                    let j = if jitter_us > 0 {
                        self.fault_rng.gen_range(0..=jitter_us)
                    } else {
                        0
                    };
                    delay += extra_us + j;
                    true
                }
                FaultAction::Fail { probability, limit } => {
                    if limit.is_some_and(|l| st.fired >= l) {
                        false
                    } else if probability >= 1.0 || self.fault_rng.gen::<f64>() < probability {
                        fail = true;
                        true
                    } else {
                        false
                    }
                }
                _ => false,
            };
            if fired {
                self.faults[i].fired += 1;
                if let Some(t) = &mut self.trace {
                    t.firings.push(FaultFiring {
                        time: self.clock,
                        fault: i,
                        user: f.user,
                        request: f.request,
                        service,
                    });
                }
            }
            if fail {
                break;
            }
        }
        if fail {
            self.finish(fr, Outcome::failure(FailureReason::Injected));
        } else if delay > 0 {
            self.schedule(self.clock.plus(delay), Ev::CallArrive(fr));
        } else {
            self.arrive(fr);
        }
    }

    fn jitter(&self, f: &Frame) -> f64 {
        let j = self.topo.services()[f.service as usize].latency_jitter;
        if j == 0.0 {
            return 1.0;
        }
        let u = unit(hash3(self.jitter_seed, f.request, u64::from(f.service) * 2 + u64::from(f.attempt)));
        1.0 + j * (2.0 * u - 1.0)
    }

    /// Call reaches the service: region health, cache, instance, queue.
    fn arrive(&mut self, fr: FrameRef) {
        let f = self.frame(fr).expect("arriving frame is live");
        let s = f.service as usize;
        let r = f.region as usize;
        if self.blackholes[r] > 0 {
            self.finish(fr, Outcome::failure(FailureReason::RegionDown));
            return;
        }
        let spec = &self.topo.services()[s];
        let (n, queue, memory_limit, base_ms) =
            (spec.instances_per_region, spec.queue, spec.memory_limit, spec.base_latency_ms);
        if spec.cache.is_some() {
            let hit = self.caches[s]
                .get(&(f.region, f.key))
                .filter(|e| e.expires > self.clock)
                .map(|e| e.outcome);
            match hit {
                Some(outcome) => {
                    let lat = SimTime::from_millis_f64(base_ms * self.jitter(&f)).micros();
                    self.frame_mut(fr).cached = Some(outcome);
                    self.schedule(self.clock.plus(lat), Ev::Respond(fr));
                    return;
                }
                None => self.frame_mut(fr).cache_miss = true,
            }
        }
        let nreg = self.topo.regions().len();
        let base = self.inst_base[s * nreg + r];
        let cursor = &mut self.rr[s * nreg + r];
        let mut picked = None;
        for k in 0..n {
            let idx = base + (*cursor + k) % n;
            if self.instances[idx as usize].alive {
                picked = Some(idx);
                *cursor = (*cursor + k + 1) % n;
                break;
            }
        }
        let Some(idx) = picked else {
            self.finish(fr, Outcome::failure(FailureReason::NoInstance));
            return;
        };
        let queue_len = self.instances[idx as usize].queue.len();
        if let QueuePolicy::Bounded(max) = queue {
            if queue_len >= max as usize {
                self.finish(fr, Outcome::failure(FailureReason::Rejected));
                return;
            }
        }
        self.frame_mut(fr).instance = Some(idx);
        let inst = &mut self.instances[idx as usize];
        inst.queue.push_back(fr);
        if inst.queue.len() as u64 > memory_limit && !inst.dying {
            inst.dying = true;
            self.schedule(self.clock, Ev::InstanceDeath(idx));
        }
        self.pump(idx);
    }

    /// Starts queued calls while the instance has a free slot.
    fn pump(&mut self, idx: u32) {
        loop {
            let inst = &self.instances[idx as usize];
            if !inst.alive || inst.dispatch_pending || inst.queue.is_empty() {
                return;
            }
            let spec = &self.topo.services()[inst.id.service];
            if spec.max_in_flight.is_some_and(|m| inst.in_flight >= m) {
                return;
            }
            if inst.next_free > self.clock {
                let t = inst.next_free;
                self.instances[idx as usize].dispatch_pending = true;
                self.schedule(t, Ev::Dispatch(idx));
                return;
            }
            self.dispatch(idx);
        }
    }

    fn dispatch(&mut self, idx: u32) {
        let now = self.clock;
        let inst = &mut self.instances[idx as usize];
        let fr = inst.queue.pop_front().expect("non-empty queue");
        let service = inst.id.service;
        let slot = self.slot_us[service];
        inst.next_free = now.plus(slot);
        inst.in_flight += 1;
        let q = inst.queue.len() as f64;
        self.sink.record_busy(service, now, slot);
        let spec = &self.topo.services()[service];
        let f = self.frame(fr).expect("queued frame is live");
        let ms = spec.base_latency_ms * self.jitter(&f) * (1.0 + q / spec.capacity_per_instance);
        let fm = self.frame_mut(fr);
        fm.holds_slot = true;
        self.schedule(now.plus(SimTime::from_millis_f64(ms).micros()), Ev::LocalDone(fr));
    }

    fn kill(&mut self, idx: u32) {
        let inst = &mut self.instances[idx as usize];
        if !inst.alive {
            return;
        }
        inst.alive = false;
        let queued: Vec<FrameRef> = inst.queue.drain(..).collect();
        self.deaths.push(DeathRecord {
            time: self.clock,
            instance: inst.id,
            queue_len: queued.len() as u64,
        });
        for fr in queued {
            if self.frame(fr).is_some() {
                self.finish(fr, Outcome::failure(FailureReason::InstanceDied));
            }
        }
    }

    /// Calls the next dependency, or completes the frame when none remain.
    fn advance(&mut self, fr: FrameRef) {
        let f = self.frame(fr).expect("advancing frame is live");
        let calls = self.topo.calls(f.service as usize);
        let i = f.next_child as usize;
        if i < calls.len() {
            let callee = calls[i].callee;
            self.call(fr, callee, Role::Child(i));
        } else {
            let outcome = if f.fallback {
                Outcome::Fallback { degraded: f.degraded }
            } else {
                Outcome::Success
            };
            self.finish(fr, outcome);
        }
    }

    fn finish(&mut self, fr: FrameRef, outcome: Outcome) {
        let f = self.frame(fr).expect("finishing frame is live");
        self.frames[fr.idx as usize].live = false;
        self.free.push(fr.idx);
        let s = f.service as usize;
        if f.holds_slot {
            let idx = f.instance.expect("slot holder has an instance");
            let inst = &mut self.instances[idx as usize];
            inst.in_flight -= 1;
            if inst.alive {
                self.pump(idx);
            }
        }
        let latency_ms = self.clock.since(f.issued_at) as f64 / 1e3;
        self.sink.record_call(s, latency_ms, outcome.is_failure());
        if f.cache_miss {
            if let Some(c) = self.topo.services()[s].cache {
                if !outcome.is_failure() || c.cache_errors {
                    let expires = self.clock.plus(SimTime::from_secs_f64(c.ttl_s).micros());
                    self.caches[s].insert((f.region, f.key), CacheEntry { outcome, expires });
                }
            }
        }
        if let Some(t) = &mut self.trace {
            t.calls.push(CallRecord {
                time: self.clock,
                request: f.request,
                user: f.user,
                service: s,
                caller: f.caller.map(usize::from),
                latency_ms,
                outcome,
                cache_hit: f.cached.is_some(),
            });
        }
        match f.parent {
            Some(p) => self.on_child_result(p, f.role, s, outcome),
            None => self.boundary(f.request, f.user, Some(f.region as usize), f.issued_at, outcome),
        }
    }

    fn boundary(&mut self, request: u64, user: u64, region: Option<usize>, issued_at: SimTime, outcome: Outcome) {
        let latency_ms = self.clock.since(issued_at) as f64 / 1e3;
        self.sink.record(&OutcomeEvent {
            time: self.clock,
            user,
            outcome,
            latency_ms,
        });
        if let Some(t) = &mut self.trace {
            t.boundary.push(BoundaryRecord {
                time: self.clock,
                request,
                user,
                region,
                latency_ms,
                outcome,
            });
        }
    }

    fn on_child_result(&mut self, parent: FrameRef, role: Role, callee: usize, outcome: Outcome) {
        let p = self.frame(parent).expect("parent outlives its calls");
        if let Some(idx) = p.instance {
            if !self.instances[idx as usize].alive {
                self.finish(parent, Outcome::failure(FailureReason::InstanceDied));
                return;
            }
        }
        let (i, original) = match role {
            Role::Child(i) => (i, callee),
            Role::Bypass(i) => (i, self.topo.calls(p.service as usize)[i].callee),
            Role::Root => unreachable!("root frames have no parent"),
        };
        let kind = self.topo.calls(p.service as usize)[i].kind;
        match outcome {
            Outcome::Success | Outcome::Fallback { .. } => {
                if let Role::Bypass(_) = role {
                    self.sink.record_fallback(original);
                }
                let pm = self.frame_mut(parent);
                if let Outcome::Fallback { degraded } = outcome {
                    pm.fallback = true;
                    pm.degraded |= degraded;
                }
                if let Role::Bypass(_) = role {
                    pm.fallback = true;
                }
                pm.next_child += 1;
                self.advance(parent);
            }
            Outcome::Failure { .. } => {
                let spec = &self.topo.services()[original];
                match (&spec.fallback, role) {
                    (Fallback::DefaultValue, Role::Child(_)) => {
                        self.sink.record_fallback(original);
                        self.degrade(parent);
                    }
                    (Fallback::BypassTo(_), Role::Child(_)) => {
                        let target = self.topo.bypass_target(original).expect("validated bypass target");
                        self.call(parent, target, Role::Bypass(i));
                    }
                    _ => {
                        if kind == CallKind::Degradable && spec.criticality == Criticality::Degradable {
                            self.degrade(parent);
                        } else {
                            self.finish(parent, Outcome::failure(FailureReason::Dependency));
                        }
                    }
                }
            }
        }
    }

    fn degrade(&mut self, parent: FrameRef) {
        let pm = self.frame_mut(parent);
        pm.fallback = true;
        pm.degraded = true;
        pm.next_child += 1;
        self.advance(parent);
    }
}

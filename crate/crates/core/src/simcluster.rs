//! Discrete-event simulation of a chain of replicated microservices.
//!
//! Requests arrive at the first service of the chain and visit every service
//! in order. Each replica serves up to `concurrency` requests at once and
//! buffers up to `queue_capacity` more in FIFO order; a request that finds
//! every replica of a service full is dropped and counted as a failure.
//!
//! All randomness (inter-arrival gaps and per-stage service demands) is drawn
//! when a request arrives, so two clusters with the same seed and workload
//! see identical request streams whatever their replica counts.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::percentile_nearest_rank;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceTimeDist {
    #[default]
    Exponential,
    Deterministic,
}

/// Static description of one microservice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    /// Mean service demand per request, in milliseconds.
    pub service_time_ms: f64,
    #[serde(default)]
    pub service_time_dist: ServiceTimeDist,
    /// Waiting slots per replica, beyond the ones in service.
    pub queue_capacity: u32,
    /// Requests a replica serves simultaneously.
    pub concurrency: u32,
    /// CPU fraction of one replica consumed by each request in service.
    pub cpu_per_request: f64,
    /// Baseline memory utilization of an idle replica.
    pub mem_per_replica: f64,
    /// Extra memory utilization per request held by a replica, in service
    /// or waiting.
    #[serde(default)]
    pub mem_per_request: f64,
    pub min_pods: u32,
    pub max_pods: u32,
    /// Seconds between a scale-up request and the new replica accepting work.
    pub provisioning_delay_s: f64,
    /// Replicas at simulation start; `min_pods` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_pods: Option<u32>,
}

impl ServiceSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = self.service_time_ms > 0.0
            && self.concurrency > 0
            && self.cpu_per_request > 0.0
            && self.mem_per_replica > 0.0
            && self.mem_per_request >= 0.0
            && self.min_pods > 0
            && self.provisioning_delay_s >= 0.0;
        if !positive {
            return Err(Error::Config(format!("service `{}` has non-positive parameters", self.name)));
        }
        if self.min_pods > self.max_pods {
            return Err(Error::Config(format!("service `{}` has min_pods > max_pods", self.name)));
        }
        if self.initial_pods.is_some_and(|n| n < self.min_pods || n > self.max_pods) {
            return Err(Error::Config(format!("service `{}` starts outside its pod bounds", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub services: Vec<ServiceSpec>,
    /// Services visited by every request, in order. Empty means all services
    /// in declaration order.
    #[serde(default)]
    pub chain: Vec<String>,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.services.is_empty() {
            return Err(Error::Config("cluster has no services".into()));
        }
        for (i, s) in self.services.iter().enumerate() {
            s.validate()?;
            if self.services[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate service `{}`", s.name)));
            }
        }
        for name in &self.chain {
            self.index_of(name)?;
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.services
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownService(name.to_string()))
    }

    fn chain_indices(&self) -> Result<Vec<usize>> {
        if self.chain.is_empty() {
            Ok((0..self.services.len()).collect())
        } else {
            self.chain.iter().map(|n| self.index_of(n)).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    #[default]
    Poisson,
    /// Evenly spaced arrivals at the phase rate.
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub duration_s: f64,
    /// Mean arrival rate in requests per second.
    pub rate: f64,
}

/// Piecewise-constant open-loop workload. No requests arrive after the last
/// phase ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadPlan {
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub process: ArrivalProcess,
}

impl WorkloadPlan {
    pub fn new(phases: Vec<Phase>) -> Self {
        WorkloadPlan { phases, process: ArrivalProcess::Poisson }
    }

    /// Alternating normal/high phases, each `phase_s` long, `cycles` times.
    pub fn alternating(normal: f64, high: f64, phase_s: f64, cycles: usize) -> Self {
        let phases = (0..cycles)
            .flat_map(|_| {
                [Phase { duration_s: phase_s, rate: normal }, Phase { duration_s: phase_s, rate: high }]
            })
            .collect();
        WorkloadPlan::new(phases)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.iter().any(|p| p.duration_s.is_nan() || p.duration_s <= 0.0 || p.rate.is_nan() || p.rate < 0.0) {
            return Err(Error::Config("workload phases need positive durations and non-negative rates".into()));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.phases.iter().map(|p| p.duration_s).sum()
    }

    /// The phase active at time `t` and its end time.
    fn phase_at(&self, t: f64) -> Option<(Phase, f64)> {
        let mut end = 0.0;
        for p in &self.phases {
            end += p.duration_s;
            if t < end {
                return Some((*p, end));
            }
        }
        None
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        self.phase_at(t).map_or(0.0, |(p, _)| p.rate)
    }
}

/// Per-service metrics over one monitoring window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    pub name: String,
    /// Time-averaged CPU utilization per replica, in [0, 1].
    pub cpu: f64,
    /// Memory fraction held by the current replicas, in [0, 1].
    pub mem: f64,
    /// Active replicas at the end of the window.
    pub replicas: u32,
}

/// Metrics for one monitoring window `[start, end]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub start: f64,
    pub end: f64,
    /// All services, in cluster declaration order.
    pub services: Vec<ServiceMetrics>,
    /// Ingress arrival rate over the window (requests/s).
    pub qps: f64,
    /// Nearest-rank p90 end-to-end latency of requests completed in the
    /// window, in ms; 0 for an empty window.
    pub latency_p90_ms: f64,
    /// Completions over finished attempts in the window; 1 for an empty window.
    pub success_rate: f64,
    pub window_arrivals: u64,
    pub window_completions: u64,
    pub window_failures: u64,
    pub total_arrivals: u64,
    pub total_completions: u64,
    pub total_failures: u64,
    pub in_flight: u64,
}

impl MetricsSnapshot {
    pub fn service(&self, name: &str) -> Option<&ServiceMetrics> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn total_replicas(&self) -> u32 {
        self.services.iter().map(|s| s.replicas).sum()
    }
}

#[derive(Clone, Debug)]
struct Request {
    arrival: f64,
    demands: Vec<f64>,
    stage: usize,
}

#[derive(Debug)]
struct Replica {
    id: u64,
    busy: u32,
    queue: VecDeque<Request>,
    retiring: bool,
}

impl Replica {
    fn load(&self) -> usize {
        self.busy as usize + self.queue.len()
    }

    fn idle(&self) -> bool {
        self.busy == 0 && self.queue.is_empty()
    }
}

#[derive(Debug, Default)]
struct ServiceState {
    replicas: Vec<Replica>,
    /// Pending scale-ups as (ready time, token).
    pending: Vec<(f64, u64)>,
    busy_total: u32,
    busy_area: f64,
    replica_area: f64,
    /// Requests at this service, in service or queued.
    held_total: u32,
    held_area: f64,
}

impl ServiceState {
    fn active(&self) -> u32 {
        self.replicas.iter().filter(|r| !r.retiring).count() as u32
    }
}

#[derive(Debug)]
enum Event {
    Arrival,
    Complete { service: usize, replica: u64, req: Request },
    PodReady { service: usize, token: u64 },
}

#[derive(Debug)]
struct Scheduled {
    time: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap and we want the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Running simulation of a cluster under a workload plan.
pub struct Cluster {
    spec: ClusterSpec,
    plan: WorkloadPlan,
    chain: Vec<usize>,
    services: Vec<ServiceState>,
    clock: f64,
    events: BinaryHeap<Scheduled>,
    seq: u64,
    next_id: u64,
    rng: ChaCha8Rng,
    window_start: f64,
    window_arrivals: u64,
    window_completions: u64,
    window_failures: u64,
    window_latencies: Vec<f64>,
    total_arrivals: u64,
    total_completions: u64,
    total_failures: u64,
    in_flight: u64,
}

impl Cluster {
    /// Builds a cluster with every service at its initial replica count.
    pub fn new(spec: ClusterSpec, plan: WorkloadPlan, seed: u64) -> Result<Self> {
        spec.validate()?;
        plan.validate()?;
        let chain = spec.chain_indices()?;
        let mut c = Cluster {
            services: spec.services.iter().map(|_| ServiceState::default()).collect(),
            spec,
            plan,
            chain,
            clock: 0.0,
            events: BinaryHeap::new(),
            seq: 0,
            next_id: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            window_start: 0.0,
            window_arrivals: 0,
            window_completions: 0,
            window_failures: 0,
            window_latencies: Vec::new(),
            total_arrivals: 0,
            total_completions: 0,
            total_failures: 0,
            in_flight: 0,
        };
        for s in 0..c.services.len() {
            let spec = &c.spec.services[s];
            for _ in 0..spec.initial_pods.unwrap_or(spec.min_pods) {
                c.add_replica(s);
            }
        }
        if let Some(t) = c.next_arrival(0.0) {
            c.schedule(t, Event::Arrival);
        }
        Ok(c)
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn plan(&self) -> &WorkloadPlan {
        &self.plan
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Active (non-retiring) replicas of a service.
    pub fn replicas(&self, service: &str) -> Result<u32> {
        Ok(self.services[self.spec.index_of(service)?].active())
    }

    /// Replicas a service will have once pending scale-ups complete.
    pub fn desired_replicas(&self, service: &str) -> Result<u32> {
        let s = &self.services[self.spec.index_of(service)?];
        Ok(s.active() + s.pending.len() as u32)
    }

    pub fn total_replicas(&self) -> u32 {
        self.services.iter().map(ServiceState::active).sum()
    }

    /// Processes every event with a timestamp up to `until`.
    pub fn advance(&mut self, until: f64) -> Result<()> {
        if until < self.clock {
            return Err(Error::Config(format!("cannot advance backwards from {} to {until}", self.clock)));
        }
        while self.events.peek().is_some_and(|e| e.time <= until) {
            let ev = self.events.pop().expect("peeked");
            self.integrate(ev.time);
            match ev.event {
                Event::Arrival => self.on_arrival(),
                Event::Complete { service, replica, req } => self.on_complete(service, replica, req),
                Event::PodReady { service, token } => self.on_pod_ready(service, token),
            }
        }
        self.integrate(until);
        Ok(())
    }

    /// Asynchronously moves a service towards `target` replicas.
    ///
    /// Scale-ups become active after the provisioning delay; scale-downs
    /// first cancel pending scale-ups, then remove idle replicas and mark
    /// busy ones to retire once they drain.
    pub fn request_scale(&mut self, service: &str, target: u32) -> Result<()> {
        let s = self.checked_index(service, target)?;
        let effective = self.services[s].active() + self.services[s].pending.len() as u32;
        if target > effective {
            let ready = self.clock + self.spec.services[s].provisioning_delay_s;
            for _ in effective..target {
                let token = self.fresh_id();
                self.services[s].pending.push((ready, token));
                self.schedule(ready, Event::PodReady { service: s, token });
            }
        } else if target < effective {
            let mut excess = effective - target;
            while excess > 0 && self.services[s].pending.pop().is_some() {
                excess -= 1;
            }
            self.retire(s, excess);
        }
        Ok(())
    }

    /// Sets the active replica count immediately, cancelling pending
    /// scale-ups. Used to pin allocations when sampling training data.
    pub fn set_replicas_now(&mut self, service: &str, target: u32) -> Result<()> {
        let s = self.checked_index(service, target)?;
        self.services[s].pending.clear();
        let active = self.services[s].active();
        if target > active {
            for _ in active..target {
                self.add_replica(s);
            }
        } else {
            self.retire(s, active - target);
        }
        Ok(())
    }

    /// Closes the current monitoring window and returns its metrics.
    pub fn snapshot(&mut self) -> Result<MetricsSnapshot> {
        let (start, end) = (self.window_start, self.clock);
        if end <= start {
            return Err(Error::Config("snapshot window is empty".into()));
        }
        let window = end - start;
        let services = self
            .spec
            .services
            .iter()
            .zip(self.services.iter_mut())
            .map(|(spec, st)| {
                let (cpu, held) = if st.replica_area > 0.0 {
                    ((st.busy_area / st.replica_area).min(1.0), st.held_area / st.replica_area)
                } else {
                    (0.0, 0.0)
                };
                let replicas = st.active();
                st.busy_area = 0.0;
                st.replica_area = 0.0;
                st.held_area = 0.0;
                ServiceMetrics {
                    name: spec.name.clone(),
                    cpu,
                    mem: (spec.mem_per_replica + spec.mem_per_request * held).min(1.0),
                    replicas,
                }
            })
            .collect();
        let finished = self.window_completions + self.window_failures;
        let snap = MetricsSnapshot {
            start,
            end,
            services,
            qps: self.window_arrivals as f64 / window,
            latency_p90_ms: percentile_nearest_rank(&mut self.window_latencies, 0.9).unwrap_or(0.0),
            success_rate: if finished == 0 { 1.0 } else { self.window_completions as f64 / finished as f64 },
            window_arrivals: self.window_arrivals,
            window_completions: self.window_completions,
            window_failures: self.window_failures,
            total_arrivals: self.total_arrivals,
            total_completions: self.total_completions,
            total_failures: self.total_failures,
            in_flight: self.in_flight,
        };
        self.window_start = end;
        self.window_arrivals = 0;
        self.window_completions = 0;
        self.window_failures = 0;
        self.window_latencies.clear();
        Ok(snap)
    }

    fn checked_index(&self, service: &str, target: u32) -> Result<usize> {
        let s = self.spec.index_of(service)?;
        let spec = &self.spec.services[s];
        if target < spec.min_pods || target > spec.max_pods {
            return Err(Error::ScaleOutOfBounds {
                service: service.to_string(),
                target,
                min: spec.min_pods,
                max: spec.max_pods,
            });
        }
        Ok(s)
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn schedule(&mut self, time: f64, event: Event) {
        self.seq += 1;
        self.events.push(Scheduled { time, seq: self.seq, event });
    }

    fn integrate(&mut self, t: f64) {
        let dt = t - self.clock;
        if dt > 0.0 {
            for (spec, st) in self.spec.services.iter().zip(self.services.iter_mut()) {
                st.busy_area += f64::from(st.busy_total) * spec.cpu_per_request * dt;
                st.replica_area += st.replicas.len() as f64 * dt;
                st.held_area += f64::from(st.held_total) * dt;
            }
            self.clock = t;
        }
    }

    fn add_replica(&mut self, s: usize) {
        let id = self.fresh_id();
        self.services[s].replicas.push(Replica { id, busy: 0, queue: VecDeque::new(), retiring: false });
    }

    /// Removes `count` active replicas: idle ones at once (newest first),
    /// then busy ones are marked to retire on completion.
    fn retire(&mut self, s: usize, mut count: u32) {
        let st = &mut self.services[s];
        while count > 0 {
            if let Some(pos) = st.replicas.iter().rposition(|r| !r.retiring && r.idle()) {
                st.replicas.remove(pos);
            } else if let Some(r) = st.replicas.iter_mut().rev().find(|r| !r.retiring) {
                r.retiring = true;
            } else {
                break;
            }
            count -= 1;
        }
    }

    fn next_arrival(&mut self, now: f64) -> Option<f64> {
        let mut t = now;
        loop {
            let (phase, end) = self.plan.phase_at(t)?;
            if phase.rate <= 0.0 {
                t = end;
                continue;
            }
            let gap = match self.plan.process {
                ArrivalProcess::Poisson => Exp::new(phase.rate).expect("positive rate").sample(&mut self.rng),
                ArrivalProcess::Deterministic => 1.0 / phase.rate,
            };
            if t + gap < end {
                return Some(t + gap);
            }
            // memoryless: restart the draw at the phase boundary
            t = end;
        }
    }

    fn on_arrival(&mut self) {
        let now = self.clock;
        let demands = self
            .chain
            .iter()
            .map(|&s| {
                let spec = &self.spec.services[s];
                let mean = spec.service_time_ms / 1000.0;
                match spec.service_time_dist {
                    ServiceTimeDist::Exponential => {
                        Exp::new(1.0 / mean).expect("positive mean").sample(&mut self.rng)
                    }
                    ServiceTimeDist::Deterministic => mean,
                }
            })
            .collect();
        self.total_arrivals += 1;
        self.window_arrivals += 1;
        self.in_flight += 1;
        self.dispatch(Request { arrival: now, demands, stage: 0 });
        if let Some(t) = self.next_arrival(now) {
            self.schedule(t, Event::Arrival);
        }
    }

    fn dispatch(&mut self, req: Request) {
        let s = self.chain[req.stage];
        let spec = &self.spec.services[s];
        let limit = (spec.concurrency + spec.queue_capacity) as usize;
        let concurrency = spec.concurrency;
        let st = &mut self.services[s];
        let target = st
            .replicas
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.retiring && r.load() < limit)
            .min_by_key(|(i, r)| (r.load(), *i))
            .map(|(i, _)| i);
        let Some(i) = target else {
            self.in_flight -= 1;
            self.total_failures += 1;
            self.window_failures += 1;
            return;
        };
        st.held_total += 1;
        let r = &mut st.replicas[i];
        if r.busy < concurrency {
            r.busy += 1;
            st.busy_total += 1;
            let id = r.id;
            let done = self.clock + req.demands[req.stage];
            self.schedule(done, Event::Complete { service: s, replica: id, req });
        } else {
            r.queue.push_back(req);
        }
    }

    fn on_complete(&mut self, s: usize, replica: u64, mut req: Request) {
        let now = self.clock;
        let st = &mut self.services[s];
        let pos = st.replicas.iter().position(|r| r.id == replica).expect("replica with work in flight");
        st.busy_total -= 1;
        st.held_total -= 1;
        let r = &mut st.replicas[pos];
        r.busy -= 1;
        if let Some(next) = r.queue.pop_front() {
            r.busy += 1;
            st.busy_total += 1;
            let done = now + next.demands[next.stage];
            self.schedule(done, Event::Complete { service: s, replica, req: next });
        } else if r.retiring && r.idle() {
            st.replicas.remove(pos);
        }

        req.stage += 1;
        if req.stage < self.chain.len() {
            self.dispatch(req);
        } else {
            self.in_flight -= 1;
            self.total_completions += 1;
            self.window_completions += 1;
            self.window_latencies.push((now - req.arrival) * 1000.0);
        }
    }

    fn on_pod_ready(&mut self, s: usize, token: u64) {
        let st = &mut self.services[s];
        if let Some(pos) = st.pending.iter().position(|(_, t)| *t == token) {
            st.pending.remove(pos);
            self.add_replica(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn svc(name: &str, ms: f64, conc: u32, queue: u32, min: u32, max: u32, delay: f64) -> ServiceSpec {
        ServiceSpec {
            name: name.into(),
            service_time_ms: ms,
            service_time_dist: ServiceTimeDist::Exponential,
            queue_capacity: queue,
            concurrency: conc,
            cpu_per_request: 1.0 / f64::from(conc),
            mem_per_replica: 0.05,
            mem_per_request: 0.0,
            min_pods: min,
            max_pods: max,
            provisioning_delay_s: delay,
            initial_pods: None,
        }
    }

    fn single(spec: ServiceSpec) -> ClusterSpec {
        ClusterSpec { services: vec![spec], chain: vec![] }
    }

    #[test]
    fn zero_rate_records_nothing() {
        let plan = WorkloadPlan::new(vec![Phase { duration_s: 60.0, rate: 0.0 }]);
        let mut c = Cluster::new(single(svc("a", 10.0, 1, 5, 1, 3, 1.0)), plan, 1).unwrap();
        c.advance(30.0).unwrap();
        assert_eq!(c.clock(), 30.0);
        let s = c.snapshot().unwrap();
        assert_eq!((s.window_arrivals, s.window_completions, s.window_failures), (0, 0, 0));
        assert_eq!(s.qps, 0.0);
        assert_eq!(s.success_rate, 1.0);
        assert_eq!(s.latency_p90_ms, 0.0);
    }

    #[test]
    fn unloaded_deterministic_queue() {
        let mut spec = svc("a", 100.0, 1, 5, 1, 1, 0.0);
        spec.service_time_dist = ServiceTimeDist::Deterministic;
        let plan = WorkloadPlan {
            phases: vec![Phase { duration_s: 100.0, rate: 1.0 }],
            process: ArrivalProcess::Deterministic,
        };
        let mut c = Cluster::new(single(spec), plan, 1).unwrap();
        c.advance(50.5).unwrap();
        let s = c.snapshot().unwrap();
        assert_eq!(s.window_completions, 50);
        assert!((s.latency_p90_ms - 100.0).abs() < 1e-6);
        assert_eq!(s.success_rate, 1.0);
    }

    #[test]
    fn memory_tracks_held_requests() {
        let mut spec = svc("a", 100.0, 1, 5, 1, 1, 0.0);
        spec.service_time_dist = ServiceTimeDist::Deterministic;
        spec.mem_per_request = 0.5;
        let plan = WorkloadPlan {
            phases: vec![Phase { duration_s: 100.0, rate: 1.0 }],
            process: ArrivalProcess::Deterministic,
        };
        let mut c = Cluster::new(single(spec), plan, 1).unwrap();
        c.advance(50.5).unwrap();
        let s = c.snapshot().unwrap();
        // 50 requests each held 0.1 s over a 50.5 s window
        let expected = 0.05 + 0.5 * 5.0 / 50.5;
        assert!((s.services[0].mem - expected).abs() < 1e-9, "{}", s.services[0].mem);
    }

    #[test]
    fn overload_success_rate_matches_flow_conservation() {
        // capacity 10 req/s, offered 40 req/s
        let spec = svc("a", 100.0, 1, 10, 1, 1, 0.0);
        let plan = WorkloadPlan::new(vec![Phase { duration_s: 2_000.0, rate: 40.0 }]);
        let mut c = Cluster::new(single(spec), plan, 3).unwrap();
        c.advance(100.0).unwrap();
        c.snapshot().unwrap();
        c.advance(1_900.0).unwrap();
        let s = c.snapshot().unwrap();
        let expected = 10.0 / 40.0;
        assert!((s.success_rate - expected).abs() / expected < 0.10, "{}", s.success_rate);
    }

    #[test]
    fn scale_up_honours_provisioning_delay() {
        let plan = WorkloadPlan::new(vec![Phase { duration_s: 100.0, rate: 0.0 }]);
        let mut c = Cluster::new(single(svc("a", 10.0, 1, 5, 1, 5, 10.0)), plan, 1).unwrap();
        c.request_scale("a", 3).unwrap();
        c.advance(5.0).unwrap();
        assert_eq!(c.replicas("a").unwrap(), 1);
        assert_eq!(c.desired_replicas("a").unwrap(), 3);
        // repeating the same request schedules nothing new
        c.request_scale("a", 3).unwrap();
        c.advance(15.0).unwrap();
        assert_eq!(c.replicas("a").unwrap(), 3);
        c.request_scale("a", 1).unwrap();
        assert_eq!(c.replicas("a").unwrap(), 1);
    }

    #[test]
    fn scale_down_cancels_pending_first() {
        let plan = WorkloadPlan::new(vec![Phase { duration_s: 100.0, rate: 0.0 }]);
        let mut c = Cluster::new(single(svc("a", 10.0, 1, 5, 1, 5, 10.0)), plan, 1).unwrap();
        c.request_scale("a", 4).unwrap();
        c.request_scale("a", 2).unwrap();
        c.advance(20.0).unwrap();
        assert_eq!(c.replicas("a").unwrap(), 2);
    }

    #[test]
    fn busy_replicas_drain_before_retiring() {
        let mut spec = svc("a", 1_000.0, 1, 5, 1, 3, 0.0);
        spec.service_time_dist = ServiceTimeDist::Deterministic;
        let plan = WorkloadPlan {
            phases: vec![Phase { duration_s: 0.6, rate: 4.0 }, Phase { duration_s: 100.0, rate: 0.0 }],
            process: ArrivalProcess::Deterministic,
        };
        let mut c = Cluster::new(single(spec), plan, 1).unwrap();
        c.set_replicas_now("a", 3).unwrap();
        c.advance(0.55).unwrap(); // replicas 0 and 1 busy, 2 idle
        c.request_scale("a", 1).unwrap();
        assert_eq!(c.replicas("a").unwrap(), 1);
        assert_eq!(c.services[0].replicas.len(), 2);
        c.advance(5.0).unwrap();
        assert_eq!(c.services[0].replicas.len(), 1);
        let s = c.snapshot().unwrap();
        assert_eq!(s.total_completions, 2);
        assert_eq!(s.in_flight, 0);
    }

    #[test]
    fn scaling_errors() {
        let plan = WorkloadPlan::new(vec![Phase { duration_s: 10.0, rate: 0.0 }]);
        let mut c = Cluster::new(single(svc("a", 10.0, 1, 5, 1, 3, 1.0)), plan, 1).unwrap();
        assert!(matches!(c.request_scale("b", 2), Err(Error::UnknownService(_))));
        assert!(matches!(c.request_scale("a", 4), Err(Error::ScaleOutOfBounds { .. })));
        assert!(matches!(c.request_scale("a", 0), Err(Error::ScaleOutOfBounds { .. })));
        assert!(c.advance(-1.0).is_err());
    }

    #[test]
    fn conservation_and_latency_floor_on_a_chain() {
        let spec = ClusterSpec {
            services: vec![svc("a", 20.0, 2, 3, 1, 4, 2.0), svc("b", 30.0, 1, 2, 1, 4, 2.0)],
            chain: vec![],
        };
        let plan = WorkloadPlan::alternating(20.0, 80.0, 30.0, 3);
        let mut c = Cluster::new(spec, plan, 17).unwrap();
        let mut t = 0.0;
        while t < 180.0 {
            t += 15.0;
            c.advance(t).unwrap();
            let s = c.snapshot().unwrap();
            assert_eq!(s.total_arrivals, s.total_completions + s.total_failures + s.in_flight);
            for m in &s.services {
                assert!((0.0..=1.0).contains(&m.cpu) && (0.0..=1.0).contains(&m.mem));
            }
            if t == 60.0 {
                c.request_scale("a", 3).unwrap();
                c.request_scale("b", 4).unwrap();
            }
        }
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let run = || {
            let spec = ClusterSpec { services: vec![svc("a", 20.0, 2, 3, 1, 4, 2.0)], chain: vec![] };
            let mut c = Cluster::new(spec, WorkloadPlan::alternating(50.0, 120.0, 20.0, 2), 99).unwrap();
            (1..=5)
                .map(|k| {
                    c.advance(15.0 * k as f64).unwrap();
                    c.snapshot().unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}

//! Monitor / check / plan / update loop over a simulated cluster.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{random_plan, Hpa, HpaConfig};
use crate::error::{Error, Result};
use crate::expr::Vocabulary;
use crate::planner::{check_vocabulary, decode, gpplan, GpConfig, Individual, PlanningInput, PodAllocation};
use crate::simcluster::{Cluster, ClusterSpec, MetricsSnapshot, WorkloadPlan};
use crate::surrogate::SloPredictor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SloMetric {
    LatencyP90Ms,
    SuccessRate,
}

impl SloMetric {
    pub fn value_of(self, snapshot: &MetricsSnapshot) -> f64 {
        match self {
            SloMetric::LatencyP90Ms => snapshot.latency_p90_ms,
            SloMetric::SuccessRate => snapshot.success_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ViolatingWhenAbove,
    ViolatingWhenBelow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloSpec {
    pub metric: SloMetric,
    pub direction: Direction,
    pub threshold: f64,
    /// Value beyond which, on the safe side, resources count as wasted.
    pub over_provision_margin: f64,
}

impl SloSpec {
    pub fn latency(threshold_ms: f64, margin_ms: f64) -> Self {
        SloSpec {
            metric: SloMetric::LatencyP90Ms,
            direction: Direction::ViolatingWhenAbove,
            threshold: threshold_ms,
            over_provision_margin: margin_ms,
        }
    }

    pub fn success_rate(threshold: f64, margin: f64) -> Self {
        SloSpec {
            metric: SloMetric::SuccessRate,
            direction: Direction::ViolatingWhenBelow,
            threshold,
            over_provision_margin: margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && self.threshold > 0.0 && self.over_provision_margin.is_finite()) {
            return Err(Error::Config("SLO threshold must be positive and margin finite".into()));
        }
        let ok = match (self.metric, self.direction) {
            (SloMetric::LatencyP90Ms, Direction::ViolatingWhenAbove) => self.over_provision_margin < self.threshold,
            (SloMetric::SuccessRate, Direction::ViolatingWhenBelow) => {
                self.over_provision_margin > self.threshold && self.threshold <= 1.0
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent SLO definition {self:?}")))
        }
    }

    pub fn violates(&self, value: f64) -> bool {
        match self.direction {
            Direction::ViolatingWhenAbove => value > self.threshold,
            Direction::ViolatingWhenBelow => value < self.threshold,
        }
    }

    pub fn over_provisioned(&self, value: f64) -> bool {
        match self.direction {
            Direction::ViolatingWhenAbove => value < self.over_provision_margin,
            Direction::ViolatingWhenBelow => value >= self.over_provision_margin,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Violated,
    OverProvisioned,
    Ok,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Violated => "violated",
            Status::OverProvisioned => "over_provisioned",
            Status::Ok => "ok",
        }
    }
}

pub fn check_slo(snapshot: &MetricsSnapshot, slo: &SloSpec) -> Status {
    if snapshot.qps == 0.0 {
        return Status::Ok;
    }
    let v = slo.metric.value_of(snapshot);
    if slo.violates(v) {
        Status::Violated
    } else if slo.over_provisioned(v) {
        Status::OverProvisioned
    } else {
        Status::Ok
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaler {
    #[serde(rename = "autoslo")]
    AutoSlo,
    #[serde(rename = "ran")]
    AutoSloRan,
    Hpa,
}

impl Scaler {
    pub const ALL: [Scaler; 3] = [Scaler::AutoSlo, Scaler::AutoSloRan, Scaler::Hpa];

    pub fn name(self) -> &'static str {
        match self {
            Scaler::AutoSlo => "autoslo",
            Scaler::AutoSloRan => "ran",
            Scaler::Hpa => "hpa",
        }
    }

    pub fn needs_surrogate(self) -> bool {
        self != Scaler::Hpa
    }
}

impl fmt::Display for Scaler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scaler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scaler::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scaler `{s}` (expected autoslo, ran or hpa)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub cycle_s: f64,
    pub update_s: f64,
    pub slo: SloSpec,
    pub gp: GpConfig,
    pub bottlenecks: Vec<String>,
    pub vocabulary: Vocabulary,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.update_s > 0.0 && self.cycle_s > 0.0 && self.update_s <= self.cycle_s) {
            return Err(Error::Config("need 0 < update period <= cycle period".into()));
        }
        if self.bottlenecks.is_empty() {
            return Err(Error::Config("at least one bottleneck service is required".into()));
        }
        self.slo.validate()?;
        self.gp.validate()?;
        check_vocabulary(&self.vocabulary)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Violation { value: f64 },
    Plan { fitness: f64, surrogate_calls: usize, wall_ms: f64 },
    PlanFailed { error: String },
    Scale { service: String, from: u32, to: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// One planning round's output as written to the best-formula log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanRecord {
    pub time: f64,
    pub fitness: f64,
    pub wall_ms: f64,
    /// Formula texts, or pod counts for the random-search planner.
    pub solution: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ControllerState {
    pub best_sol: Option<Individual>,
    pub held_allocation: Option<PodAllocation>,
    pub last_snapshot: Option<MetricsSnapshot>,
    pub events: Vec<Event>,
    pub plans: Vec<PlanRecord>,
    last_planned_cycle: Option<u64>,
}

/// Outcome of one update tick.
#[derive(Clone, Debug)]
pub struct Tick {
    pub snapshot: MetricsSnapshot,
    pub status: Status,
}

pub struct Controller<'a> {
    cfg: ControllerConfig,
    scaler: Scaler,
    surrogate: Option<&'a dyn SloPredictor>,
    hpa: Option<Hpa>,
    rng: ChaCha8Rng,
    pub state: ControllerState,
}

impl<'a> Controller<'a> {
    pub fn new(
        cfg: ControllerConfig,
        scaler: Scaler,
        surrogate: Option<&'a dyn SloPredictor>,
        hpa: HpaConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if scaler.needs_surrogate() && surrogate.is_none() {
            return Err(Error::Config(format!("scaler {scaler} requires a surrogate model")));
        }
        let hpa = (scaler == Scaler::Hpa).then(|| Hpa::new(hpa)).transpose()?;
        Ok(Controller {
            cfg,
            scaler,
            surrogate,
            hpa,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: ControllerState::default(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    /// Advances the cluster to the next cycle boundary, acting every update
    /// period.
    pub fn run_cycle(&mut self, cluster: &mut Cluster) -> Result<Vec<Tick>> {
        let cycle = (cluster.clock() / self.cfg.cycle_s + 1e-9).floor();
        let end = (cycle + 1.0) * self.cfg.cycle_s;
        let mut ticks = Vec::new();
        while cluster.clock() < end - 1e-9 {
            let next = (cluster.clock() + self.cfg.update_s).min(end);
            cluster.advance(next)?;
            ticks.push(self.update(cluster)?);
        }
        Ok(ticks)
    }

    /// Monitor, check, maybe plan, then apply the current plan.
    pub fn update(&mut self, cluster: &mut Cluster) -> Result<Tick> {
        let snapshot = cluster.snapshot()?;
        let now = snapshot.end;
        let status = check_slo(&snapshot, &self.cfg.slo);
        if status == Status::Violated {
            let value = self.cfg.slo.metric.value_of(&snapshot);
            self.log(now, EventKind::Violation { value });
        }

        match self.scaler {
            Scaler::Hpa => {
                let hpa = self.hpa.as_mut().expect("hpa state exists for hpa scaler");
                let effective = cluster
                    .spec()
                    .services
                    .iter()
                    .map(|s| cluster.desired_replicas(&s.name))
                    .collect::<Result<Vec<_>>>()?;
                let targets = hpa.step(now, &snapshot, cluster.spec(), &effective)?;
                for (service, target) in targets {
                    self.scale(cluster, now, &service, target)?;
                }
            }
            Scaler::AutoSlo | Scaler::AutoSloRan => {
                let input = PlanningInput::from_snapshot(&snapshot, &self.cfg.bottlenecks)?;
                let cycle = ((now - 1e-9) / self.cfg.cycle_s).floor().max(0.0) as u64;
                let mut planned = false;
                if status != Status::Ok && self.state.last_planned_cycle != Some(cycle) {
                    self.state.last_planned_cycle = Some(cycle);
                    planned = self.plan(now, &input);
                }
                let targets = match self.scaler {
                    Scaler::AutoSlo => match &self.state.best_sol {
                        Some(best) => Some(decode(best, &input, &self.cfg.gp)?),
                        None => None,
                    },
                    _ if planned => self.state.held_allocation.clone(),
                    _ => None,
                };
                if let Some(alloc) = targets {
                    for (name, &target) in self.cfg.bottlenecks.clone().iter().zip(alloc.counts()) {
                        self.scale(cluster, now, name, target)?;
                    }
                }
            }
        }
        self.state.last_snapshot = Some(snapshot.clone());
        Ok(Tick { snapshot, status })
    }

    /// Runs one planning round; failures keep the previous plan.
    fn plan(&mut self, now: f64, input: &PlanningInput) -> bool {
        let surrogate = self.surrogate.expect("surrogate checked at construction");
        let started = Instant::now();
        let result = match self.scaler {
            Scaler::AutoSlo => gpplan(
                &self.cfg.slo,
                &self.cfg.gp,
                &self.cfg.vocabulary,
                input,
                self.state.best_sol.as_ref(),
                surrogate,
                &mut self.rng,
            )
            .map(|out| {
                let fitness = out.best.fitness.unwrap_or(f64::NAN);
                let solution = out.best.formulas.iter().map(|f| f.to_text()).collect();
                self.state.best_sol = Some(out.best);
                (fitness, out.surrogate_calls, solution)
            }),
            _ => random_plan(&self.cfg.slo, &self.cfg.gp, input, surrogate, &mut self.rng).map(|out| {
                let solution = out.best.counts().iter().map(|c| c.to_string()).collect();
                self.state.held_allocation = Some(out.best);
                (out.fitness, out.surrogate_calls, solution)
            }),
        };
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        match result {
            Ok((fitness, surrogate_calls, solution)) => {
                self.log(now, EventKind::Plan { fitness, surrogate_calls, wall_ms });
                self.state.plans.push(PlanRecord { time: now, fitness, wall_ms, solution });
                true
            }
            Err(e) => {
                self.log(now, EventKind::PlanFailed { error: e.to_string() });
                false
            }
        }
    }

    fn scale(&mut self, cluster: &mut Cluster, now: f64, service: &str, target: u32) -> Result<()> {
        let from = cluster.desired_replicas(service)?;
        if from != target {
            cluster.request_scale(service, target)?;
            self.log(now, EventKind::Scale { service: service.to_string(), from, to: target });
        }
        Ok(())
    }

    fn log(&mut self, time: f64, kind: EventKind) {
        self.state.events.push(Event { time, kind });
    }
}

/// One row of a per-run trace: the snapshot's metrics plus every service's
/// replica count.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    pub status: Status,
    pub slo_value: f64,
    pub qps: f64,
    pub bottleneck_cpu: Vec<f64>,
    pub bottleneck_mem: Vec<f64>,
    pub replicas: Vec<u32>,
    pub window_failures: u64,
}

impl TraceRow {
    pub fn total_pods(&self) -> u32 {
        self.replicas.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub violations: usize,
    pub mean_total_pods: f64,
    pub trace: Vec<TraceRow>,
    pub plans: Vec<PlanRecord>,
    pub events: Vec<Event>,
}

impl RunResult {
    /// Start and end times of each maximal run of consecutive violating
    /// snapshots.
    pub fn violation_episodes(&self) -> Vec<(f64, f64)> {
        let mut episodes = Vec::new();
        let mut open: Option<(f64, f64)> = None;
        for row in &self.trace {
            match (row.status == Status::Violated, open) {
                (true, None) => open = Some((row.time, row.time)),
                (true, Some((s, _))) => open = Some((s, row.time)),
                (false, Some(ep)) => {
                    episodes.push(ep);
                    open = None;
                }
                (false, None) => {}
            }
        }
        episodes.extend(open);
        episodes
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub scaler: Scaler,
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    pub fn mean_violations(&self) -> f64 {
        self.runs.iter().map(|r| r.violations as f64).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_pods(&self) -> f64 {
        self.runs.iter().map(|r| r.mean_total_pods).sum::<f64>() / self.runs.len().max(1) as f64
    }
}

/// Everything needed to simulate one case study under any scaler.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub cluster: ClusterSpec,
    pub workload: WorkloadPlan,
    pub controller: ControllerConfig,
    pub hpa: HpaConfig,
}

/// Per-repetition seed; repetitions are independent of each other.
pub fn run_seed(base: u64, rep: usize) -> u64 {
    base.wrapping_add(rep as u64)
}

pub fn run_once(scenario: &Scenario, scaler: Scaler, surrogate: Option<&dyn SloPredictor>, seed: u64) -> Result<RunResult> {
    let mut cluster = Cluster::new(scenario.cluster.clone(), scenario.workload.clone(), seed)?;
    let controller_seed = seed ^ scenario.controller.gp.seed.rotate_left(32) ^ 0x9E37_79B9_7F4A_7C15;
    let mut ctl = Controller::new(scenario.controller.clone(), scaler, surrogate, scenario.hpa.clone(), controller_seed)?;
    let duration = scenario.workload.duration();
    let mut trace = Vec::new();
    while cluster.clock() < duration - 1e-9 {
        for tick in ctl.run_cycle(&mut cluster)? {
            trace.push(trace_row(&tick, &scenario.controller));
        }
    }
    let violations = trace.iter().filter(|r| r.status == Status::Violated).count();
    let mean_total_pods =
        trace.iter().map(|r| f64::from(r.total_pods())).sum::<f64>() / trace.len().max(1) as f64;
    Ok(RunResult {
        seed,
        violations,
        mean_total_pods,
        trace,
        plans: std::mem::take(&mut ctl.state.plans),
        events: std::mem::take(&mut ctl.state.events),
    })
}

fn trace_row(tick: &Tick, cfg: &ControllerConfig) -> TraceRow {
    let s = &tick.snapshot;
    let pick = |f: fn(&crate::simcluster::ServiceMetrics) -> f64| {
        cfg.bottlenecks.iter().map(|b| s.service(b).map(f).unwrap_or(0.0)).collect()
    };
    TraceRow {
        time: s.end,
        status: tick.status,
        slo_value: cfg.slo.metric.value_of(s),
        qps: s.qps,
        bottleneck_cpu: pick(|m| m.cpu),
        bottleneck_mem: pick(|m| m.mem),
        replicas: s.services.iter().map(|m| m.replicas).collect(),
        window_failures: s.window_failures,
    }
}

/// Runs `reps` seeded repetitions, in parallel across threads; results are
/// ordered by repetition.
pub fn run_experiment(
    scenario: &Scenario,
    scaler: Scaler,
    surrogate: Option<&(dyn SloPredictor + Sync)>,
    reps: usize,
    base_seed: u64,
) -> Result<ExperimentResult> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(reps.max(1));
    let mut slots: Vec<Option<Result<RunResult>>> = (0..reps).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = slots.chunks_mut(reps.div_ceil(workers).max(1)).enumerate().collect();
        let per = reps.div_ceil(workers).max(1);
        for (c, chunk) in chunks {
            scope.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    let rep = c * per + i;
                    let s = surrogate.map(|m| m as &dyn SloPredictor);
                    *slot = Some(run_once(scenario, scaler, s, run_seed(base_seed, rep)));
                }
            });
        }
    });
    let runs = slots.into_iter().map(|r| r.expect("every repetition ran")).collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult { scaler, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcluster::ServiceMetrics;

    fn snap(qps: f64, latency: f64, success: f64) -> MetricsSnapshot {
        MetricsSnapshot {
            start: 0.0,
            end: 15.0,
            services: vec![ServiceMetrics { name: "a".into(), cpu: 0.5, mem: 0.1, replicas: 1 }],
            qps,
            latency_p90_ms: latency,
            success_rate: success,
            window_arrivals: 0,
            window_completions: 0,
            window_failures: 0,
            total_arrivals: 0,
            total_completions: 0,
            total_failures: 0,
            in_flight: 0,
        }
    }

    #[test]
    fn check_slo_examples() {
        let slo1 = SloSpec::latency(500.0, 300.0);
        let slo2 = SloSpec::success_rate(0.95, 0.98);
        assert_eq!(check_slo(&snap(10.0, 600.0, 1.0), &slo1), Status::Violated);
        assert_eq!(check_slo(&snap(10.0, 250.0, 1.0), &slo1), Status::OverProvisioned);
        assert_eq!(check_slo(&snap(10.0, 400.0, 1.0), &slo1), Status::Ok);
        assert_eq!(check_slo(&snap(10.0, 500.0, 1.0), &slo1), Status::Ok);
        assert_eq!(check_slo(&snap(10.0, 0.0, 0.96), &slo2), Status::Ok);
        assert_eq!(check_slo(&snap(10.0, 0.0, 0.94), &slo2), Status::Violated);
        assert_eq!(check_slo(&snap(10.0, 0.0, 0.99), &slo2), Status::OverProvisioned);
        assert_eq!(check_slo(&snap(0.0, 0.0, 1.0), &slo1), Status::Ok);
    }

    #[test]
    fn slo_validation() {
        assert!(SloSpec::latency(500.0, 300.0).validate().is_ok());
        assert!(SloSpec::latency(500.0, 600.0).validate().is_err());
        assert!(SloSpec::success_rate(0.95, 0.98).validate().is_ok());
        assert!(SloSpec::success_rate(0.95, 0.90).validate().is_err());
        let mixed = SloSpec { direction: Direction::ViolatingWhenBelow, ..SloSpec::latency(500.0, 300.0) };
        assert!(mixed.validate().is_err());
    }

    #[test]
    fn scaler_names_round_trip() {
        for s in Scaler::ALL {
            assert_eq!(s.name().parse::<Scaler>().unwrap(), s);
        }
        assert!("vpa".parse::<Scaler>().is_err());
    }

    #[test]
    fn episodes_group_consecutive_violations() {
        let row = |t: f64, st: Status| TraceRow {
            time: t,
            status: st,
            slo_value: 0.0,
            qps: 0.0,
            bottleneck_cpu: vec![],
            bottleneck_mem: vec![],
            replicas: vec![1],
            window_failures: 0,
        };
        let run = RunResult {
            seed: 0,
            violations: 3,
            mean_total_pods: 1.0,
            trace: vec![
                row(15.0, Status::Violated),
                row(30.0, Status::Violated),
                row(45.0, Status::Ok),
                row(60.0, Status::Violated),
            ],
            plans: vec![],
            events: vec![],
        };
        assert_eq!(run.violation_episodes(), vec![(15.0, 30.0), (60.0, 60.0)]);
    }
}

//! Comparison scalers: a CPU-threshold horizontal autoscaler and random
//! search over pod counts scored with the planner's fitness.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::SloSpec;
use crate::error::{Error, Result};
use crate::planner::{fitness, GpConfig, PlanningInput, PodAllocation};
use crate::simcluster::{ClusterSpec, MetricsSnapshot};
use crate::surrogate::SloPredictor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpaConfig {
    /// Per-replica CPU utilization target as a fraction.
    pub target_cpu: f64,
    pub sync_period_s: f64,
    pub scale_down_window_s: f64,
}

impl Default for HpaConfig {
    fn default() -> Self {
        HpaConfig { target_cpu: 0.8, sync_period_s: 15.0, scale_down_window_s: 300.0 }
    }
}

impl HpaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_cpu > 0.0 && self.target_cpu <= 1.0) {
            return Err(Error::Config(format!("hpa target {} not in (0, 1]", self.target_cpu)));
        }
        if !(self.sync_period_s > 0.0 && self.scale_down_window_s >= 0.0) {
            return Err(Error::Config("hpa periods must be positive".into()));
        }
        Ok(())
    }
}

/// `ceil(current × cpu / target)`, with a small tolerance so a utilization
/// exactly at target keeps the current count.
pub fn hpa_desired(current: u32, cpu: f64, target: f64) -> u32 {
    let raw = f64::from(current) * cpu / target;
    (raw - 1e-9).ceil().max(0.0) as u32
}

/// Horizontal autoscaler state: recent recommendations per service.
#[derive(Clone, Debug)]
pub struct Hpa {
    cfg: HpaConfig,
    history: Vec<VecDeque<(f64, u32)>>,
}

impl Hpa {
    pub fn new(cfg: HpaConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Hpa { cfg, history: Vec::new() })
    }

    /// Scale targets for every service whose count should change.
    ///
    /// Scale-ups apply at once; a scale-down goes only to the largest
    /// recommendation seen within the stabilization window.
    pub fn step(
        &mut self,
        now: f64,
        snapshot: &MetricsSnapshot,
        spec: &ClusterSpec,
        effective: &[u32],
    ) -> Result<Vec<(String, u32)>> {
        if effective.len() != spec.services.len() {
            return Err(Error::Config("one current count per service is required".into()));
        }
        self.history.resize_with(spec.services.len(), VecDeque::new);
        let mut out = Vec::new();
        for (i, svc) in spec.services.iter().enumerate() {
            let m = snapshot.service(&svc.name).ok_or_else(|| Error::UnknownService(svc.name.clone()))?;
            let desired = hpa_desired(m.replicas, m.cpu, self.cfg.target_cpu).clamp(svc.min_pods, svc.max_pods);
            let hist = &mut self.history[i];
            hist.push_back((now, desired));
            while hist.front().is_some_and(|&(t, _)| t < now - self.cfg.scale_down_window_s - 1e-9) {
                hist.pop_front();
            }
            let current = effective[i];
            let target = if desired > current {
                desired
            } else {
                hist.iter().map(|&(_, d)| d).max().unwrap_or(desired).min(current)
            };
            if target != current {
                out.push((svc.name.clone(), target));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomPlanOutcome {
    pub best: PodAllocation,
    pub fitness: f64,
    pub surrogate_calls: usize,
}

/// Uniform random search over `[pod_min, pod_max]^N` with the same budget
/// and fitness as the GP planner. Ties keep the earliest sample.
pub fn random_plan<R: Rng + ?Sized>(
    slo: &SloSpec,
    cfg: &GpConfig,
    input: &PlanningInput,
    surrogate: &dyn SloPredictor,
    rng: &mut R,
) -> Result<RandomPlanOutcome> {
    cfg.validate()?;
    slo.validate()?;
    let n = input.slots.len();
    if n == 0 {
        return Err(Error::Config("no bottleneck services to plan for".into()));
    }
    let budget = cfg.population_size * cfg.generations;
    let mut best: Option<(PodAllocation, f64)> = None;
    for _ in 0..budget {
        let counts = (0..n).map(|_| rng.random_range(cfg.pod_min..=cfg.pod_max)).collect();
        let alloc = PodAllocation::new(counts, cfg.pod_min, cfg.pod_max)?;
        let predicted = surrogate.predict(input, &alloc)?;
        if !predicted.is_finite() {
            return Err(Error::Prediction(format!("surrogate returned {predicted}")));
        }
        let f = fitness(predicted, slo, &alloc, cfg)?;
        if best.as_ref().is_none_or(|(_, b)| f < *b) {
            best = Some((alloc, f));
        }
    }
    let (best, fitness) = best.ok_or_else(|| Error::Config("random search budget is zero".into()))?;
    Ok(RandomPlanOutcome { best, fitness, surrogate_calls: budget })
}

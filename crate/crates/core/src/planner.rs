//! Genetic-programming planner.
//!
//! Evolves individuals (one scaling formula per bottleneck service), scores
//! each by decoding it to a pod allocation and asking the surrogate for the
//! predicted SLO value, and returns the fittest individual. Fitness is
//! minimized: satisfying individuals score in `(0, 1]` by pod usage,
//! violating ones score above 1 by severity.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::SloSpec;
use crate::error::{Error, Result};
use crate::expr::{crossover_one_point, mutate_one_point, EvalContext, Expr, MetricName, Vocabulary};
use crate::simcluster::{MetricsSnapshot, ServiceMetrics};
use crate::surrogate::SloPredictor;

/// Metrics a formula may bind: ingress qps plus the cpu, memory and current
/// replica count of the service the formula controls.
pub const KNOWN_METRICS: [&str; 4] = ["qps", "cpu", "mem", "pods"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub tournament_size: usize,
    pub max_tree_depth: usize,
    pub init_grow_depth: usize,
    pub pod_min: u32,
    pub pod_max: u32,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            population_size: 50,
            generations: 30,
            crossover_rate: 0.9,
            mutation_rate: 0.1,
            tournament_size: 3,
            max_tree_depth: 15,
            init_grow_depth: 4,
            pod_min: 1,
            pod_max: 10,
            seed: 0,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = (0.0..=1.0).contains(&self.crossover_rate) && (0.0..=1.0).contains(&self.mutation_rate);
        if !rates_ok {
            return Err(Error::Config("crossover and mutation rates must lie in [0, 1]".into()));
        }
        if self.population_size == 0 || self.generations == 0 || self.tournament_size == 0 {
            return Err(Error::Config("population, generations and tournament size must be positive".into()));
        }
        if self.tournament_size > self.population_size {
            return Err(Error::Config("tournament size exceeds population size".into()));
        }
        if self.max_tree_depth == 0 || self.init_grow_depth == 0 || self.init_grow_depth > self.max_tree_depth {
            return Err(Error::Config("grow depth must lie in [1, max_tree_depth]".into()));
        }
        if self.pod_min == 0 || self.pod_min > self.pod_max {
            return Err(Error::Config("pod bounds must satisfy 1 <= pod_min <= pod_max".into()));
        }
        Ok(())
    }
}

/// Candidate strategy: one formula per bottleneck service, in fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub formulas: Vec<Expr>,
    pub fitness: Option<f64>,
}

impl Individual {
    pub fn new(formulas: Vec<Expr>) -> Self {
        Individual { formulas, fitness: None }
    }

    fn fit(&self) -> f64 {
        self.fitness.unwrap_or(f64::INFINITY)
    }
}

/// Pod counts for the bottleneck services, each within the configured bounds.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PodAllocation {
    counts: Vec<u32>,
}

impl PodAllocation {
    pub fn new(counts: Vec<u32>, pod_min: u32, pod_max: u32) -> Result<Self> {
        if let Some(c) = counts.iter().find(|&&c| c < pod_min || c > pod_max) {
            return Err(Error::Config(format!("pod count {c} outside [{pod_min}, {pod_max}]")));
        }
        Ok(PodAllocation { counts })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

/// Operational metrics of the bottleneck services, in slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanningInput {
    pub qps: f64,
    pub slots: Vec<ServiceMetrics>,
}

impl PlanningInput {
    pub fn from_snapshot(snapshot: &MetricsSnapshot, bottlenecks: &[String]) -> Result<Self> {
        let slots = bottlenecks
            .iter()
            .map(|b| snapshot.service(b).cloned().ok_or_else(|| Error::UnknownService(b.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(PlanningInput { qps: snapshot.qps, slots })
    }

    /// Metric bindings for the formula of `slot`.
    pub fn context(&self, slot: usize) -> EvalContext {
        let s = &self.slots[slot];
        let mut ctx = EvalContext::new();
        for (name, value) in KNOWN_METRICS.iter().zip([self.qps, s.cpu, s.mem, f64::from(s.replicas)]) {
            ctx.bind(MetricName::new(*name).expect("static metric name"), value);
        }
        ctx
    }
}

/// Rejects vocabularies referencing metrics the planner cannot bind.
pub fn check_vocabulary(vocab: &Vocabulary) -> Result<()> {
    match vocab.names().iter().find(|n| !KNOWN_METRICS.contains(&n.as_str())) {
        Some(n) => Err(Error::Config(format!("metric `{n}` is not one of {KNOWN_METRICS:?}"))),
        None => Ok(()),
    }
}

/// Evaluates each formula, rounds half-up and clamps into the pod bounds.
pub fn decode(ind: &Individual, input: &PlanningInput, cfg: &GpConfig) -> Result<PodAllocation> {
    if ind.formulas.len() != input.slots.len() {
        return Err(Error::Config(format!(
            "individual has {} formulas for {} bottleneck services",
            ind.formulas.len(),
            input.slots.len()
        )));
    }
    let counts = ind
        .formulas
        .iter()
        .enumerate()
        .map(|(slot, f)| {
            let raw = f.evaluate(&input.context(slot))?;
            let rounded = (raw + 0.5).floor();
            Ok(rounded.clamp(f64::from(cfg.pod_min), f64::from(cfg.pod_max)) as u32)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PodAllocation { counts })
}

/// Severity of violation (above 1) or pod efficiency (at most 1).
pub fn fitness(predicted: f64, slo: &SloSpec, alloc: &PodAllocation, cfg: &GpConfig) -> Result<f64> {
    if slo.threshold == 0.0 {
        return Err(Error::Config("SLO threshold must be non-zero".into()));
    }
    if slo.violates(predicted) {
        Ok((slo.threshold - predicted).abs() / slo.threshold + 1.0)
    } else {
        let n = alloc.counts.len().max(1) as f64;
        Ok(f64::from(alloc.total()) / (f64::from(cfg.pod_max) * n))
    }
}

/// Result of one planning round.
#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub best: Individual,
    /// Best fitness in the surviving population after each generation.
    pub history: Vec<f64>,
    pub surrogate_calls: usize,
}

struct Scorer<'a> {
    slo: &'a SloSpec,
    cfg: &'a GpConfig,
    input: &'a PlanningInput,
    surrogate: &'a dyn SloPredictor,
    cache: HashMap<PodAllocation, f64>,
    calls: usize,
}

impl Scorer<'_> {
    fn score(&mut self, ind: &mut Individual) -> Result<()> {
        let alloc = decode(ind, self.input, self.cfg)?;
        let predicted = match self.cache.get(&alloc) {
            Some(p) => *p,
            None => {
                self.calls += 1;
                let p = self.surrogate.predict(self.input, &alloc)?;
                if !p.is_finite() {
                    return Err(Error::Prediction(format!("surrogate returned {p}")));
                }
                self.cache.insert(alloc.clone(), p);
                p
            }
        };
        ind.fitness = Some(fitness(predicted, self.slo, &alloc, self.cfg)?);
        Ok(())
    }
}

/// Random initial population grown at `init_grow_depth`.
pub fn initial_population<R: Rng + ?Sized>(
    n_slots: usize,
    vocab: &Vocabulary,
    cfg: &GpConfig,
    rng: &mut R,
) -> Result<Vec<Individual>> {
    (0..cfg.population_size)
        .map(|_| {
            let formulas = (0..n_slots)
                .map(|_| Expr::grow(vocab, cfg.init_grow_depth, rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(Individual::new(formulas))
        })
        .collect()
}

/// Index of the tournament winner among `k` uniform draws (with replacement).
fn tournament<R: Rng + ?Sized>(pool: &[Individual], k: usize, rng: &mut R) -> usize {
    let mut best = rng.random_range(0..pool.len());
    for _ in 1..k {
        let c = rng.random_range(0..pool.len());
        if pool[c].fit() < pool[best].fit() || (pool[c].fit() == pool[best].fit() && c < best) {
            best = c;
        }
    }
    best
}

/// Produces `population_size` offspring from tournament-selected parents.
///
/// Crossover swaps subtrees of the same formula slot in both parents; each
/// offspring then mutates one slot with probability `mutation_rate`.
pub fn breed<R: Rng + ?Sized>(
    population: &[Individual],
    vocab: &Vocabulary,
    cfg: &GpConfig,
    rng: &mut R,
) -> Result<Vec<Individual>> {
    if population.is_empty() {
        return Err(Error::Config("cannot breed an empty population".into()));
    }
    let k = cfg.tournament_size.min(population.len());
    let mut offspring = Vec::with_capacity(cfg.population_size + 1);
    while offspring.len() < cfg.population_size {
        let p1 = &population[tournament(population, k, rng)];
        let p2 = &population[tournament(population, k, rng)];
        let mut c1 = Individual::new(p1.formulas.clone());
        let mut c2 = Individual::new(p2.formulas.clone());
        if rng.random_bool(cfg.crossover_rate) {
            let slot = rng.random_range(0..c1.formulas.len());
            let (x, y) = crossover_one_point(&p1.formulas[slot], &p2.formulas[slot], cfg.max_tree_depth, rng);
            c1.formulas[slot] = x;
            c2.formulas[slot] = y;
        }
        for c in [&mut c1, &mut c2] {
            if rng.random_bool(cfg.mutation_rate) {
                let slot = rng.random_range(0..c.formulas.len());
                c.formulas[slot] = mutate_one_point(&c.formulas[slot], vocab, cfg.max_tree_depth, rng)?;
            }
        }
        offspring.push(c1);
        offspring.push(c2);
    }
    offspring.truncate(cfg.population_size);
    Ok(offspring)
}

/// Survivor selection: reduces `pool` to `population_size` by repeated
/// tournaments whose winner leaves the pool, so no individual survives
/// twice. The single best of `pool` is always kept.
fn select<R: Rng + ?Sized>(mut pool: Vec<Individual>, cfg: &GpConfig, rng: &mut R) -> Vec<Individual> {
    let target = cfg.population_size.min(pool.len());
    let mut next = Vec::with_capacity(target);
    next.push(pool.swap_remove(best_index(&pool)));
    while next.len() < target {
        let k = cfg.tournament_size.min(pool.len());
        let w = tournament(&pool, k, rng);
        next.push(pool.swap_remove(w));
    }
    next
}

fn best_index(pop: &[Individual]) -> usize {
    let mut best = 0;
    for (i, ind) in pop.iter().enumerate() {
        if ind.fit() < pop[best].fit() {
            best = i;
        }
    }
    best
}

/// One planning round.
///
/// The previous best solution, when given, seeds the population and is
/// re-scored against the current metrics. Generation 0 is a fresh random
/// population; later generations are bred from the survivors. Survivors are
/// selected from offspring plus the current population.
#[allow(clippy::too_many_arguments)]
pub fn gpplan<R: Rng + ?Sized>(
    slo: &SloSpec,
    cfg: &GpConfig,
    vocab: &Vocabulary,
    input: &PlanningInput,
    best_sol: Option<&Individual>,
    surrogate: &dyn SloPredictor,
    rng: &mut R,
) -> Result<PlanOutcome> {
    cfg.validate()?;
    slo.validate()?;
    let n_slots = input.slots.len();
    if n_slots == 0 {
        return Err(Error::Config("no bottleneck services to plan for".into()));
    }
    let mut scorer = Scorer { slo, cfg, input, surrogate, cache: HashMap::new(), calls: 0 };

    let mut population: Vec<Individual> = Vec::new();
    if let Some(b) = best_sol {
        if b.formulas.len() != n_slots {
            return Err(Error::Config("previous best solution has the wrong number of formulas".into()));
        }
        let mut seed = Individual::new(b.formulas.clone());
        scorer.score(&mut seed)?;
        population.push(seed);
    }

    let mut history = Vec::with_capacity(cfg.generations);
    for t in 0..cfg.generations {
        let mut offspring = if t == 0 {
            initial_population(n_slots, vocab, cfg, rng)?
        } else {
            breed(&population, vocab, cfg, rng)?
        };
        for w in offspring.iter_mut() {
            scorer.score(w)?;
        }
        offspring.append(&mut population);
        population = select(offspring, cfg, rng);
        history.push(population[best_index(&population)].fit());
    }

    let best = population.swap_remove(best_index(&population));
    Ok(PlanOutcome { best, history, surrogate_calls: scorer.calls })
}

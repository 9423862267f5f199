//! Offline-trained SLO predictor.
//!
//! The surrogate maps the operational metrics of the bottleneck services
//! plus a candidate allocation to the SLO value the cluster would show. The
//! main model is a bagged ensemble of squared-error regression trees; a
//! linear model and a mean predictor are kept for model selection.
//!
//! Feature layout is `[cpu_1..cpu_N, mem_1..mem_N, qps, pods_1..pods_N]` in
//! bottleneck order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::SloMetric;
use crate::error::{Error, Result};
use crate::planner::{PlanningInput, PodAllocation};
use crate::simcluster::{Cluster, ClusterSpec, Phase, WorkloadPlan};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MIN_TRAINING_RECORDS: usize = 50;
pub const HOLDOUT_FRACTION: f64 = 0.2;
pub const TARGET_COLUMN: &str = "slo_value";
/// Utilization from which measured CPU no longer tracks demand.
pub const SATURATED_CPU: f64 = 0.9;

/// Anything that predicts the SLO value of a candidate allocation.
pub trait SloPredictor {
    fn predict(&self, input: &PlanningInput, alloc: &PodAllocation) -> Result<f64>;
}

/// Column names for a set of bottleneck services.
pub fn feature_schema(bottlenecks: &[String]) -> Vec<String> {
    let mut names: Vec<String> = bottlenecks.iter().map(|b| format!("cpu_{b}")).collect();
    names.extend(bottlenecks.iter().map(|b| format!("mem_{b}")));
    names.push("qps".to_string());
    names.extend(bottlenecks.iter().map(|b| format!("pods_{b}")));
    names
}

/// Feature vector for a candidate allocation.
///
/// Per-replica CPU is rescaled from the current replica count to the
/// candidate one; memory is passed through as observed. Measured CPU saturates at 1, so when `demand_per_qps` holds a CPU cost
/// per unit of qps for each slot, the busy-replica demand used for the
/// rescaling is at least `cost × qps`. An empty slice disables this.
pub fn features_for(input: &PlanningInput, alloc: &PodAllocation, demand_per_qps: &[f64]) -> Result<Vec<f64>> {
    let counts = alloc.counts();
    if counts.len() != input.slots.len() {
        return Err(Error::Prediction(format!(
            "allocation has {} counts for {} services",
            counts.len(),
            input.slots.len()
        )));
    }
    if !demand_per_qps.is_empty() && demand_per_qps.len() != counts.len() {
        return Err(Error::Prediction("one demand coefficient per service is required".into()));
    }
    let n = counts.len();
    let mut f = Vec::with_capacity(3 * n + 1);
    f.extend((0..n).map(|i| {
        let s = &input.slots[i];
        let mut busy = s.cpu * f64::from(s.replicas.max(1));
        if let Some(k) = demand_per_qps.get(i) {
            busy = busy.max(k * input.qps);
        }
        (busy / f64::from(counts[i].max(1))).min(1.0)
    }));
    f.extend(input.slots.iter().map(|s| s.mem));
    f.push(input.qps);
    f.extend(counts.iter().map(|&c| f64::from(c)));
    Ok(f)
}

/// Per-slot CPU cost per unit of qps, fitted through the origin on records
/// where no slot is saturated (a saturated upstream service throttles the
/// load seen downstream). Zero where no such record exists.
pub fn fit_demand(records: &[TrainingRecord], n_slots: usize) -> Vec<f64> {
    (0..n_slots)
        .map(|i| {
            let (mut dq, mut qq) = (0.0, 0.0);
            for r in records {
                let (cpu, qps, pods) = (r.features[i], r.features[2 * n_slots], r.features[2 * n_slots + 1 + i]);
                if r.features[..n_slots].iter().all(|&c| c < SATURATED_CPU) && qps > 0.0 {
                    dq += cpu * pods * qps;
                    qq += qps * qps;
                }
            }
            if qq > 0.0 {
                dq / qq
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 100, max_depth: None, min_leaf: 2, bootstrap: true, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    fn fit(x: &[Vec<f64>], y: &[f64], rows: Vec<usize>, params: &ForestParams) -> Self {
        let mut tree = RegressionTree { nodes: Vec::new() };
        tree.grow(x, y, rows, 1, params);
        tree
    }

    fn grow(&mut self, x: &[Vec<f64>], y: &[f64], rows: Vec<usize>, depth: usize, params: &ForestParams) -> usize {
        let id = self.nodes.len();
        let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(Node::Leaf { value: mean });

        let depth_ok = params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || rows.len() < 2 * params.min_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold)) = best_split(x, y, &rows, params.min_leaf.max(1)) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| x[i][feature] <= threshold);
        let left = self.grow(x, y, l, depth + 1, params);
        let right = self.grow(x, y, r, depth + 1, params);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    i = if features[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// Best squared-error split over all features, or `None` when no split
/// reduces the error while leaving `min_leaf` rows on each side.
#[allow(clippy::needless_range_loop)]
fn best_split(x: &[Vec<f64>], y: &[f64], rows: &[usize], min_leaf: usize) -> Option<(usize, f64)> {
    let n = rows.len();
    // centred targets keep the running sums small
    let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / n as f64;
    let yc = |r: usize| y[r] - mean;
    let total: f64 = rows.iter().map(|&r| yc(r)).sum();
    let total_sq: f64 = rows.iter().map(|&r| yc(r) * yc(r)).sum();
    let parent_sse = total_sq - total * total / n as f64;
    if parent_sse <= 1e-12 * (mean * mean).max(1.0) {
        return None;
    }
    let n_features = x[rows[0]].len();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = rows.to_vec();
    for f in 0..n_features {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let (mut sum_l, mut sq_l) = (0.0, 0.0);
        for k in 0..n - 1 {
            let yi = yc(order[k]);
            sum_l += yi;
            sq_l += yi * yi;
            let n_l = k + 1;
            let n_r = n - n_l;
            if n_l < min_leaf || n_r < min_leaf {
                continue;
            }
            let (lo, hi) = (x[order[k]][f], x[order[k + 1]][f]);
            if lo == hi {
                continue;
            }
            let sum_r = total - sum_l;
            let sq_r = total_sq - sq_l;
            let sse = (sq_l - sum_l * sum_l / n_l as f64) + (sq_r - sum_r * sum_r / n_r as f64);
            // equal partitions can be reached through different features;
            // ties within rounding go to the first candidate
            if best.is_none_or(|(b, _, _)| sse < b - 1e-9 * parent_sse) {
                best = Some((sse, f, lo + (hi - lo) / 2.0));
            }
        }
    }
    best.filter(|(sse, _, _)| *sse < parent_sse).map(|(_, f, t)| (f, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<RegressionTree>,
}

impl Forest {
    /// Trains on every record; bootstrap samples are drawn per tree from a
    /// seeded stream.
    pub fn train(records: &[TrainingRecord], params: &ForestParams) -> Result<Self> {
        if records.is_empty() || params.n_trees == 0 {
            return Err(Error::Training("forest needs records and at least one tree".into()));
        }
        let x: Vec<Vec<f64>> = records.iter().map(|r| r.features.clone()).collect();
        let y: Vec<f64> = records.iter().map(|r| r.target).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let trees = (0..params.n_trees)
            .map(|_| {
                let rows = if params.bootstrap {
                    (0..records.len()).map(|_| rng.random_range(0..records.len())).collect()
                } else {
                    (0..records.len()).collect()
                };
                RegressionTree::fit(&x, &y, rows, params)
            })
            .collect();
        Ok(Forest { trees })
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(features)).sum::<f64>() / self.trees.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Forest,
    Linear,
    Mean,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forest" => Ok(ModelKind::Forest),
            "linear" => Ok(ModelKind::Linear),
            "mean" => Ok(ModelKind::Mean),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelBody {
    Forest(Forest),
    Linear { intercept: f64, coefficients: Vec<f64> },
    Mean { value: f64 },
}

/// Held-out quality of a model. `r2` is `None` when the held-out targets
/// have zero variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelQuality {
    pub r2: Option<f64>,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub records: usize,
    pub train_records: usize,
    pub holdout_records: usize,
    pub quality: Option<ModelQuality>,
}

/// A trained surrogate with its feature schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub version: u32,
    pub kind: ModelKind,
    pub schema: Vec<String>,
    pub meta: TrainingMeta,
    /// CPU cost per unit of qps for each bottleneck; see [`features_for`].
    #[serde(default)]
    pub demand_per_qps: Vec<f64>,
    body: ModelBody,
}

impl SurrogateModel {
    pub fn predict_features(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.schema.len() {
            return Err(Error::Prediction(format!(
                "expected {} features, got {}",
                self.schema.len(),
                features.len()
            )));
        }
        Ok(match &self.body {
            ModelBody::Forest(f) => f.predict(features),
            ModelBody::Linear { intercept, coefficients } => {
                intercept + coefficients.iter().zip(features).map(|(c, x)| c * x).sum::<f64>()
            }
            ModelBody::Mean { value } => *value,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: SurrogateModel = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported model version {}", model.version)));
        }
        Ok(model)
    }

    /// Fails unless the model was trained for exactly these bottlenecks.
    pub fn check_schema(&self, bottlenecks: &[String]) -> Result<()> {
        if self.schema != feature_schema(bottlenecks) {
            return Err(Error::Prediction(format!(
                "model schema {:?} does not match bottlenecks {bottlenecks:?}",
                self.schema
            )));
        }
        Ok(())
    }
}

impl SloPredictor for SurrogateModel {
    fn predict(&self, input: &PlanningInput, alloc: &PodAllocation) -> Result<f64> {
        let names: Vec<String> = input.slots.iter().map(|s| s.name.clone()).collect();
        self.check_schema(&names)?;
        self.predict_features(&features_for(input, alloc, &self.demand_per_qps)?)
    }
}

fn check_records(records: &[TrainingRecord], width: usize) -> Result<()> {
    if records.len() < MIN_TRAINING_RECORDS {
        return Err(Error::Training(format!(
            "need at least {MIN_TRAINING_RECORDS} records, got {}",
            records.len()
        )));
    }
    for r in records {
        if r.features.len() != width || r.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training("record with missing or non-finite features".into()));
        }
        if !r.target.is_finite() || r.target < 0.0 {
            return Err(Error::Training("record with invalid target".into()));
        }
    }
    Ok(())
}

/// Seeded 80/20 split into (train, held out).
pub fn split_holdout(records: &[TrainingRecord], seed: u64) -> (Vec<TrainingRecord>, Vec<TrainingRecord>) {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED));
    let n_hold = ((records.len() as f64) * HOLDOUT_FRACTION).round() as usize;
    let hold = idx[..n_hold].iter().map(|&i| records[i].clone()).collect();
    let train = idx[n_hold..].iter().map(|&i| records[i].clone()).collect();
    (train, hold)
}

fn train_body(kind: ModelKind, records: &[TrainingRecord], params: &ForestParams) -> Result<ModelBody> {
    match kind {
        ModelKind::Forest => Ok(ModelBody::Forest(Forest::train(records, params)?)),
        ModelKind::Mean => {
            let value = records.iter().map(|r| r.target).sum::<f64>() / records.len() as f64;
            Ok(ModelBody::Mean { value })
        }
        ModelKind::Linear => {
            let p = records[0].features.len();
            let x = DMatrix::from_fn(records.len(), p + 1, |i, j| if j == 0 { 1.0 } else { records[i].features[j - 1] });
            let y = DVector::from_iterator(records.len(), records.iter().map(|r| r.target));
            let beta = x
                .svd(true, true)
                .solve(&y, 1e-10)
                .map_err(|e| Error::Training(format!("least squares failed: {e}")))?;
            Ok(ModelBody::Linear { intercept: beta[0], coefficients: beta.iter().skip(1).copied().collect() })
        }
    }
}

/// Trains a model on 80% of the records and reports R² and MAE on the rest.
pub fn fit(records: &[TrainingRecord], schema: &[String], kind: ModelKind, params: &ForestParams) -> Result<SurrogateModel> {
    check_records(records, schema.len())?;
    let (train, hold) = split_holdout(records, params.seed);
    let body = train_body(kind, &train, params)?;
    let mut model = SurrogateModel {
        version: MODEL_FORMAT_VERSION,
        kind,
        schema: schema.to_vec(),
        meta: TrainingMeta {
            records: records.len(),
            train_records: train.len(),
            holdout_records: hold.len(),
            quality: None,
        },
        demand_per_qps: fit_demand(&train, (schema.len() - 1) / 3),
        body,
    };
    model.meta.quality = Some(evaluate_model(&model, &hold)?);
    Ok(model)
}

/// R² = 1 − SS_res/SS_tot and mean absolute error on `held_out`.
pub fn evaluate_model(model: &SurrogateModel, held_out: &[TrainingRecord]) -> Result<ModelQuality> {
    if held_out.is_empty() {
        return Err(Error::Training("held-out set is empty".into()));
    }
    let preds = held_out
        .iter()
        .map(|r| model.predict_features(&r.features))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = held_out.iter().map(|r| r.target).collect();
    Ok(quality(&targets, &preds))
}

pub fn quality(targets: &[f64], preds: &[f64]) -> ModelQuality {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = targets.iter().zip(preds).map(|(t, p)| (t - p).powi(2)).sum();
    let mae = targets.iter().zip(preds).map(|(t, p)| (t - p).abs()).sum::<f64>() / n;
    let r2 = if ss_tot > 0.0 { Some(1.0 - ss_res / ss_tot) } else { None };
    ModelQuality { r2, mae }
}

/// Fits every model kind on the same split and keeps the one with the
/// highest R², breaking ties by lower MAE.
pub fn select_model(records: &[TrainingRecord], schema: &[String], params: &ForestParams) -> Result<(SurrogateModel, Vec<SurrogateModel>)> {
    let candidates = [ModelKind::Forest, ModelKind::Linear, ModelKind::Mean]
        .into_iter()
        .map(|k| fit(records, schema, k, params))
        .collect::<Result<Vec<_>>>()?;
    let key = |m: &SurrogateModel| {
        let q = m.meta.quality.expect("fit reports quality");
        (q.r2.unwrap_or(f64::NEG_INFINITY), -q.mae)
    };
    let mut best = 0;
    for (i, m) in candidates.iter().enumerate() {
        let (r2, neg_mae) = key(m);
        let (br2, bneg) = key(&candidates[best]);
        if r2 > br2 || (r2 == br2 && neg_mae > bneg) {
            best = i;
        }
    }
    Ok((candidates[best].clone(), candidates))
}

/// How training data is sampled from the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Upper bound of the uniformly drawn arrival rate.
    pub max_rate: f64,
    pub duration_s: f64,
    /// One record per interval.
    pub interval_s: f64,
    /// Unmeasured lead-in after each configuration change, so backlog left
    /// by the previous configuration does not leak into the record.
    pub settle_s: f64,
    /// Consecutive intervals sharing one rate and pod configuration, so
    /// slow queue build-up near saturation shows in the later records.
    pub hold_intervals: usize,
}

/// Drives a cluster with random load levels and random bottleneck pod
/// counts, recording one training record per interval.
///
/// Every `hold_intervals` intervals a uniform arrival rate in
/// `[0, max_rate]` and a uniform in-bounds replica count per bottleneck are
/// drawn and applied at once.
pub fn collect_training_data(
    spec: &ClusterSpec,
    bottlenecks: &[String],
    metric: SloMetric,
    plan: &SamplingPlan,
    seed: u64,
) -> Result<Vec<TrainingRecord>> {
    let SamplingPlan { max_rate, duration_s, interval_s, settle_s, hold_intervals } = *plan;
    if hold_intervals == 0 {
        return Err(Error::Config("hold_intervals must be positive".into()));
    }
    if !(duration_s > 0.0 && interval_s > 0.0 && max_rate > 0.0) {
        return Err(Error::Config("duration, interval and max rate must be positive".into()));
    }
    if !(settle_s >= 0.0 && settle_s < interval_s) {
        return Err(Error::Config("settle time must lie in [0, interval)".into()));
    }
    let intervals = (duration_s / interval_s).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases = (0..intervals.div_ceil(hold_intervals))
        .map(|_| Phase { duration_s: interval_s * hold_intervals as f64, rate: rng.random_range(0.0..=max_rate) })
        .collect();
    let mut cluster = Cluster::new(spec.clone(), WorkloadPlan::new(phases), rng.random())?;
    let bounds = bottlenecks
        .iter()
        .map(|b| spec.index_of(b).map(|i| (spec.services[i].min_pods, spec.services[i].max_pods)))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(intervals);
    let mut counts: Vec<u32> = Vec::new();
    for k in 0..intervals {
        let start = k as f64 * interval_s;
        let fresh = k % hold_intervals == 0;
        if fresh {
            counts = bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
            for (b, &c) in bottlenecks.iter().zip(&counts) {
                cluster.set_replicas_now(b, c)?;
            }
        }
        if fresh && settle_s > 0.0 {
            cluster.advance(start + settle_s)?;
            cluster.snapshot()?;
        }
        cluster.advance(start + interval_s)?;
        let snap = cluster.snapshot()?;
        let input = PlanningInput::from_snapshot(&snap, bottlenecks)?;
        let alloc = PodAllocation::new(counts.clone(), 1, u32::MAX)?;
        records.push(TrainingRecord { features: features_for(&input, &alloc, &[])?, target: metric.value_of(&snap) });
    }
    Ok(records)
}

pub fn write_training_csv(path: &Path, schema: &[String], records: &[TrainingRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = schema.iter().map(String::as_str).collect();
    header.push(TARGET_COLUMN);
    w.write_record(&header)?;
    for r in records {
        w.write_record(r.features.iter().chain(std::iter::once(&r.target)).map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_csv(path: &Path) -> Result<(Vec<String>, Vec<TrainingRecord>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.last().map(String::as_str) != Some(TARGET_COLUMN) {
        return Err(Error::Config(format!("last column must be `{TARGET_COLUMN}`")));
    }
    let schema = header[..header.len() - 1].to_vec();
    let mut records = Vec::new();
    for row in r.records() {
        let row = row?;
        let values = row
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| Error::Config(format!("bad number `{v}` in training data"))))
            .collect::<Result<Vec<_>>>()?;
        let (target, features) = values.split_last().ok_or_else(|| Error::Config("empty row".into()))?;
        records.push(TrainingRecord { features: features.to_vec(), target: *target });
    }
    Ok((schema, records))
}

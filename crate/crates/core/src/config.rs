//! Experiment configuration files and the built-in presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::HpaConfig;
use crate::controller::{ControllerConfig, Scenario, SloSpec};
use crate::error::{Error, Result};
use crate::expr::Vocabulary;
use crate::planner::GpConfig;
use crate::simcluster::{ClusterSpec, Phase, WorkloadPlan};
use crate::surrogate::{ForestParams, SamplingPlan};

pub const CONFIG_VERSION: u32 = 1;

const SHOP: &str = include_str!("../presets/shop.toml");
const CHATBOT: &str = include_str!("../presets/chatbot.toml");

pub const PRESETS: [&str; 2] = ["shop", "chatbot"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub cycle_s: f64,
    pub update_s: f64,
    pub bottlenecks: Vec<String>,
    pub vocabulary: Vec<String>,
}

/// Workload as repeated normal/high blocks, optionally with extra phases
/// listed explicitly instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    #[serde(default)]
    pub normal_rate: f64,
    #[serde(default)]
    pub high_rate: f64,
    #[serde(default)]
    pub phase_s: f64,
    #[serde(default)]
    pub cycles: usize,
    /// Length of the stepped climb at the start of each high phase; counts
    /// towards `phase_s`.
    #[serde(default)]
    pub ramp_s: f64,
    #[serde(default)]
    pub ramp_steps: usize,
    /// When non-empty, used verbatim and the fields above are ignored.
    #[serde(default)]
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub process: crate::simcluster::ArrivalProcess,
}

impl WorkloadSection {
    pub fn plan(&self) -> WorkloadPlan {
        let mut plan = if !self.phases.is_empty() {
            WorkloadPlan::new(self.phases.clone())
        } else if self.ramp_steps == 0 || self.ramp_s <= 0.0 {
            WorkloadPlan::alternating(self.normal_rate, self.high_rate, self.phase_s, self.cycles)
        } else {
            let step_s = self.ramp_s / self.ramp_steps as f64;
            let mut phases = Vec::new();
            for _ in 0..self.cycles {
                phases.push(Phase { duration_s: self.phase_s, rate: self.normal_rate });
                for k in 1..=self.ramp_steps {
                    let frac = k as f64 / (self.ramp_steps + 1) as f64;
                    let rate = self.normal_rate + (self.high_rate - self.normal_rate) * frac;
                    phases.push(Phase { duration_s: step_s, rate });
                }
                phases.push(Phase { duration_s: self.phase_s - self.ramp_s, rate: self.high_rate });
            }
            WorkloadPlan::new(phases)
        };
        plan.process = self.process;
        plan
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// Upper bound of the uniformly drawn arrival rate.
    pub max_rate: f64,
    pub hours: f64,
    pub interval_s: f64,
    #[serde(default)]
    pub settle_s: f64,
    #[serde(default = "one")]
    pub hold_intervals: usize,
}

fn one() -> usize {
    1
}

impl TrainingSection {
    pub fn sampling(&self, hours: f64) -> SamplingPlan {
        SamplingPlan {
            max_rate: self.max_rate,
            duration_s: hours * 3600.0,
            interval_s: self.interval_s,
            settle_s: self.settle_s,
            hold_intervals: self.hold_intervals,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub reps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub cluster: ClusterSpec,
    pub workload: WorkloadSection,
    pub slo: SloSpec,
    pub control: ControlSection,
    pub gp: GpConfig,
    #[serde(default)]
    pub hpa: HpaConfig,
    pub training: TrainingSection,
    #[serde(default)]
    pub forest: ForestParams,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "shop" => Self::from_toml(SHOP),
            "chatbot" => Self::from_toml(CHATBOT),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected one of {PRESETS:?})"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Preset name or path to a configuration file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if PRESETS.contains(&name_or_path) {
            Self::preset(name_or_path)
        } else {
            Self::load(Path::new(name_or_path))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.cluster.validate()?;
        if self.workload.phases.is_empty() && self.workload.ramp_s >= self.workload.phase_s && self.workload.ramp_steps > 0 {
            return Err(Error::Config("ramp must be shorter than the phase".into()));
        }
        let plan = self.workload.plan();
        plan.validate()?;
        if plan.phases.is_empty() {
            return Err(Error::Config("workload has no phases".into()));
        }
        self.hpa.validate()?;
        self.controller()?.validate()?;
        for b in &self.control.bottlenecks {
            let s = &self.cluster.services[self.cluster.index_of(b)?];
            if self.gp.pod_min < s.min_pods || self.gp.pod_max > s.max_pods {
                return Err(Error::Config(format!(
                    "planner bounds [{}, {}] exceed bounds of `{b}`",
                    self.gp.pod_min, self.gp.pod_max
                )));
            }
        }
        let t = &self.training;
        if !(t.max_rate > 0.0 && t.hours > 0.0 && t.interval_s > 0.0) {
            return Err(Error::Config("training rate, hours and interval must be positive".into()));
        }
        if !(t.settle_s >= 0.0 && t.settle_s < t.interval_s) {
            return Err(Error::Config("training settle time must lie in [0, interval)".into()));
        }
        if t.hold_intervals == 0 {
            return Err(Error::Config("training hold_intervals must be positive".into()));
        }
        if self.run.reps == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        Ok(())
    }

    pub fn controller(&self) -> Result<ControllerConfig> {
        Ok(ControllerConfig {
            cycle_s: self.control.cycle_s,
            update_s: self.control.update_s,
            slo: self.slo,
            gp: self.gp.clone(),
            bottlenecks: self.control.bottlenecks.clone(),
            vocabulary: Vocabulary::new(self.control.vocabulary.iter().cloned())?,
        })
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Ok(Scenario {
            cluster: self.cluster.clone(),
            workload: self.workload.plan(),
            controller: self.controller()?,
            hpa: self.hpa.clone(),
        })
    }
}

//! Command-line front end: training-data collection, surrogate fitting,
//! simulated runs and the comparison table.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::controller::{run_experiment, ExperimentResult, Scaler};
use crate::error::{Error, Result};
use crate::stats::{build_table, ScalerRuns};
use crate::surrogate::{
    collect_training_data, feature_schema, fit, read_training_csv, select_model, write_training_csv, ModelKind,
    SurrogateModel,
};

#[derive(Debug, Parser)]
#[command(name = "autoslo", version, about = "SLO-driven auto-scaling experiments on a simulated cluster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drive the cluster with random load and pod counts and record training data.
    Traindata(TraindataArgs),
    /// Train a surrogate model and report held-out R² and MAE.
    Fit(FitArgs),
    /// Run repeated simulations under one scaler.
    Run(RunArgs),
    /// Build the comparison table from three `run` output directories.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct TraindataArgs {
    /// Preset name (shop, chatbot) or path to a configuration file.
    #[arg(long, default_value = "shop")]
    pub config: String,
    /// Simulated hours; defaults to the configuration value.
    #[arg(long)]
    pub hours: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// forest, linear, mean, or auto to keep the best by held-out R².
    #[arg(long, default_value = "forest")]
    pub model: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trees in the forest.
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value = "shop")]
    pub config: String,
    #[arg(long, default_value = "autoslo")]
    pub scaler: String,
    /// Surrogate model file; required for autoslo and ran.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Base seed; defaults to the configuration value.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Repetitions; defaults to the configuration value.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub autoslo: PathBuf,
    #[arg(long)]
    pub hpa: PathBuf,
    #[arg(long)]
    pub ran: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_config() {
        2
    } else {
        1
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Traindata(a) => cmd_traindata(&a).map(|_| ()),
        Command::Fit(a) => cmd_fit(&a).map(|_| ()),
        Command::Run(a) => cmd_run(&a).map(|_| ()),
        Command::Compare(a) => cmd_compare(&a).map(|_| ()),
    }
}

pub fn cmd_traindata(args: &TraindataArgs) -> Result<usize> {
    let cfg = ExperimentConfig::resolve(&args.config)?;
    let hours = args.hours.unwrap_or(cfg.training.hours);
    if !(hours.is_finite() && hours > 0.0) {
        return Err(Error::Config(format!("--hours must be positive, got {hours}")));
    }
    let records = collect_training_data(
        &cfg.cluster,
        &cfg.control.bottlenecks,
        cfg.slo.metric,
        &cfg.training.sampling(hours),
        args.seed,
    )?;
    write_training_csv(&args.out, &feature_schema(&cfg.control.bottlenecks), &records)?;
    println!("wrote {} records to {}", records.len(), args.out.display());
    Ok(records.len())
}

pub fn cmd_fit(args: &FitArgs) -> Result<SurrogateModel> {
    if !args.data.is_file() {
        return Err(Error::Config(format!("training data `{}` not found", args.data.display())));
    }
    let (schema, records) = read_training_csv(&args.data)?;
    let params = crate::surrogate::ForestParams { n_trees: args.trees, seed: args.seed, ..Default::default() };
    let model = if args.model == "auto" {
        let (best, all) = select_model(&records, &schema, &params)?;
        for m in &all {
            print_quality(m);
        }
        best
    } else {
        fit(&records, &schema, args.model.parse::<ModelKind>()?, &params)?
    };
    print_quality(&model);
    model.save(&args.out)?;
    Ok(model)
}

fn print_quality(m: &SurrogateModel) {
    let q = m.meta.quality.expect("fit reports quality");
    let r2 = q.r2.map_or("undefined".to_string(), |r| format!("{r:.4}"));
    println!("{:?}: R2={r2} MAE={:.4} (holdout {})", m.kind, q.mae, m.meta.holdout_records);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub case: String,
    pub scaler: String,
    pub rep: usize,
    pub seed: u64,
    pub violations: usize,
    pub mean_total_pods: f64,
    pub plans: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub case: String,
    pub scaler: String,
    pub reps: usize,
    pub mean_total_pods: f64,
    pub mean_violations: f64,
}

pub fn cmd_run(args: &RunArgs) -> Result<ExperimentResult> {
    let cfg = ExperimentConfig::resolve(&args.config)?;
    let scaler: Scaler = args.scaler.parse()?;
    let reps = args.reps.unwrap_or(cfg.run.reps);
    if reps == 0 {
        return Err(Error::Config("--reps must be positive".into()));
    }
    let model = match (&args.model, scaler.needs_surrogate()) {
        (Some(path), true) => {
            let m = SurrogateModel::load(path)?;
            m.check_schema(&cfg.control.bottlenecks)
                .map_err(|e| Error::Config(format!("model does not fit this configuration: {e}")))?;
            Some(m)
        }
        (None, true) => return Err(Error::Config(format!("scaler {scaler} needs --model"))),
        (_, false) => None,
    };
    let scenario = cfg.scenario()?;
    let result = run_experiment(
        &scenario,
        scaler,
        model.as_ref().map(|m| m as _),
        reps,
        args.seed.unwrap_or(cfg.run.seed),
    )?;
    write_run_outputs(&args.out_dir, &cfg, &result)?;
    println!(
        "{} {}: mean pods {:.2}, mean violations {:.2} over {} runs",
        cfg.name,
        scaler,
        result.mean_pods(),
        result.mean_violations(),
        reps
    );
    Ok(result)
}

pub fn write_run_outputs(dir: &Path, cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let scaler = result.scaler.name();
    for (rep, run) in result.runs.iter().enumerate() {
        write_trace(&dir.join(format!("trace_{scaler}_{rep:02}.csv")), cfg, run)?;
    }

    let mut runs = csv::Writer::from_path(dir.join("runs.csv"))?;
    for (rep, run) in result.runs.iter().enumerate() {
        runs.serialize(RunRow {
            case: cfg.name.clone(),
            scaler: scaler.to_string(),
            rep,
            seed: run.seed,
            violations: run.violations,
            mean_total_pods: run.mean_total_pods,
            plans: run.plans.len(),
        })?;
    }
    runs.flush()?;

    let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
    summary.serialize(SummaryRow {
        case: cfg.name.clone(),
        scaler: scaler.to_string(),
        reps: result.runs.len(),
        mean_total_pods: result.mean_pods(),
        mean_violations: result.mean_violations(),
    })?;
    summary.flush()?;

    let mut plans = csv::Writer::from_path(dir.join("best_formulas.csv"))?;
    plans.write_record(["rep", "time", "fitness", "wall_ms", "solution"])?;
    for (rep, run) in result.runs.iter().enumerate() {
        for p in &run.plans {
            plans.write_record([
                rep.to_string(),
                p.time.to_string(),
                p.fitness.to_string(),
                format!("{:.3}", p.wall_ms),
                p.solution.join(" ; "),
            ])?;
        }
    }
    plans.flush()?;
    Ok(())
}

fn write_trace(path: &Path, cfg: &ExperimentConfig, run: &crate::controller::RunResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let b = &cfg.control.bottlenecks;
    let mut header = vec!["time".to_string(), "status".to_string(), "slo_value".to_string()];
    header.extend(b.iter().map(|s| format!("cpu_{s}")));
    header.extend(b.iter().map(|s| format!("mem_{s}")));
    header.push("qps".into());
    header.extend(cfg.cluster.services.iter().map(|s| format!("pods_{}", s.name)));
    header.extend(["total_pods".to_string(), "window_failures".to_string()]);
    w.write_record(&header)?;
    for row in &run.trace {
        let mut rec = vec![row.time.to_string(), row.status.as_str().to_string(), row.slo_value.to_string()];
        rec.extend(row.bottleneck_cpu.iter().map(f64::to_string));
        rec.extend(row.bottleneck_mem.iter().map(f64::to_string));
        rec.push(row.qps.to_string());
        rec.extend(row.replicas.iter().map(u32::to_string));
        rec.push(row.total_pods().to_string());
        rec.push(row.window_failures.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_runs(dir: &Path) -> Result<(String, ScalerRuns)> {
    let path = dir.join("runs.csv");
    if !path.is_file() {
        return Err(Error::Config(format!("`{}` not found", path.display())));
    }
    let mut r = csv::Reader::from_path(&path)?;
    let rows = r.deserialize::<RunRow>().collect::<std::result::Result<Vec<_>, _>>()?;
    let first = rows.first().ok_or_else(|| Error::Config(format!("`{}` is empty", path.display())))?;
    let runs = ScalerRuns {
        scaler: first.scaler.clone(),
        pods: rows.iter().map(|r| r.mean_total_pods).collect(),
        violations: rows.iter().map(|r| r.violations as f64).collect(),
    };
    Ok((first.case.clone(), runs))
}

pub fn cmd_compare(args: &CompareArgs) -> Result<Vec<crate::stats::ComparisonRow>> {
    let (case, autoslo) = read_runs(&args.autoslo)?;
    let (_, hpa) = read_runs(&args.hpa)?;
    let (_, ran) = read_runs(&args.ran)?;
    let rows = build_table(&case, &autoslo, &hpa, &ran)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    for row in &rows {
        println!(
            "{} {} vs {}: autoslo {:.2} hpa {:.2} ran {:.2} p={:.4} A12={:.2} ({})",
            row.case,
            row.metric,
            row.baseline,
            row.autoslo_mean,
            row.hpa_mean,
            row.ran_mean,
            row.p_value,
            row.a12,
            row.magnitude.letter()
        );
    }
    Ok(rows)
}

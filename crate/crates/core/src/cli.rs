//! The `tracer` command-line tool.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::artifact::{Baselines, ModelArtifact};
use crate::config::ExperimentConfig;
use crate::dataset::{format_float, outcome_feature_names, Dataset};
use crate::em::{self, EmTrace};
use crate::error::{Result, TracerError};
use crate::metrics::{auc, MetricsReport};
use crate::predictor::{fit_ensemble_weights, predict_dataset, predict_logistic};
use crate::simulation::{generate, run_grid, summarize, GroundTruth};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SCHEMA: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "tracer", version, about = "Latent transition detection and transfer-learned risk models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw one replication of the simulation design.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        replication: usize,
    },
    /// Fit TRACER and, with a validation file, the baselines and ensemble.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        historical: PathBuf,
        #[arg(long)]
        current: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Simulation truth file; adds the posterior-vs-truth AUC to the fit summary.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Per-record predictions of every model in an artifact.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Metrics and coefficient table of an artifact on labelled data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the simulation grid.
    Grid {
        #[command(flatten)]
        common: Common,
    },
}

/// Process exit code for an error.
pub fn exit_code(err: &TracerError) -> i32 {
    match err {
        TracerError::Schema(_) | TracerError::Json(_) => EXIT_SCHEMA,
        TracerError::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => EXIT_IO,
        TracerError::Csv(_) => EXIT_SCHEMA,
        TracerError::Convergence(_) => EXIT_CONVERGENCE,
        TracerError::Io { .. } => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| TracerError::io(&out, e))?;
    Ok((cfg, out))
}

/// Runs a parsed command; returns the exit code on completion.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Simulate { common, replication } => {
            let (cfg, out) = setup(&common)?;
            cmd_simulate(&cfg, replication, &out)?;
            Ok(EXIT_OK)
        }
        Command::Fit {
            common,
            historical,
            current,
            validation,
            truth,
        } => {
            let (cfg, out) = setup(&common)?;
            let summary = cmd_fit(&cfg, &historical, &current, validation.as_deref(), truth.as_deref(), &out)?;
            if summary.converged {
                Ok(EXIT_OK)
            } else {
                eprintln!("EM did not converge in {} iterations; outputs were written", summary.iterations);
                Ok(EXIT_CONVERGENCE)
            }
        }
        Command::Predict { common, model, data } => {
            let (_, out) = setup(&common)?;
            cmd_predict(&model, &data, &out)?;
            Ok(EXIT_OK)
        }
        Command::Evaluate { common, model, data } => {
            let (cfg, out) = setup(&common)?;
            cmd_evaluate(&cfg, &model, &data, &out)?;
            Ok(EXIT_OK)
        }
        Command::Grid { common } => {
            let (cfg, out) = setup(&common)?;
            let failures = cmd_grid(&cfg, &out)?;
            if failures > 0 {
                eprintln!("{failures} grid replications failed; see grid_failures.csv");
            }
            Ok(EXIT_OK)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| TracerError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| TracerError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| TracerError::io(path, e))
}

pub fn cmd_simulate(cfg: &ExperimentConfig, replication: usize, out: &Path) -> Result<()> {
    let cohort = generate(&cfg.simulation, replication)?;
    cohort.historical.write_csv(out.join("historical.csv"))?;
    cohort.current.write_csv(out.join("current.csv"))?;
    cohort.test.write_csv(out.join("test.csv"))?;
    write_json(&out.join("truth.json"), &cohort.truth)
}

/// Written next to the artifact by `fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub converged: bool,
    pub iterations: usize,
    pub lambda1: Option<f64>,
    pub lambda2: f64,
    pub delta_l1: f64,
    pub flags: Vec<String>,
    /// AUC of the current-cohort posteriors against the true states.
    pub posterior_auc: Option<f64>,
    pub ensemble_fitted: bool,
}

fn write_trace(path: &Path, trace: &EmTrace) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "loglik", "mean_posterior", "reducer_refit"])?;
    for (i, ll) in trace.loglik.iter().enumerate() {
        w.write_record([
            i.to_string(),
            format_float(*ll),
            format_float(trace.mean_posterior[i]),
            trace.reducer_refit.get(i).copied().unwrap_or(false).to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn cmd_fit(
    cfg: &ExperimentConfig,
    historical: &Path,
    current: &Path,
    validation: Option<&Path>,
    truth: Option<&Path>,
    out: &Path,
) -> Result<FitSummary> {
    let hist = Dataset::read_csv(historical)?;
    let cur = Dataset::read_csv(current)?.align_to(hist.w_names(), hist.a_names())?;
    let started = Instant::now();
    let (params, trace) = em::fit(&hist, &cur, &cfg.em)?;
    log::info!("TRACER fit in {:.2?} ({} iterations)", started.elapsed(), trace.iterations);

    let mut artifact = ModelArtifact::new(params, trace.lambda1, trace.lambda2);
    if let Some(vpath) = validation {
        let val = artifact.align(&Dataset::read_csv(vpath)?)?;
        if !cur.has_both_classes() {
            return Err(TracerError::SingleClass("current cohort outcomes (needed for the current-only model)".into()));
        }
        let (current_eta, _) = em::fit_outcome_lasso(&cur, None, cfg.em.standardize, &cfg.em.cv)?;
        let t = predict_dataset(&artifact.params, &val)?.probability;
        let h = predict_logistic(&artifact.params.eta0, &val)?;
        let c = predict_logistic(&current_eta, &val)?;
        artifact.ensemble = Some(fit_ensemble_weights(&val, &t, &h, &c)?);
        artifact.baselines = Some(Baselines {
            historical: artifact.params.eta0.clone(),
            current: current_eta,
        });
    }
    artifact.save(out.join("model.json"))?;
    write_trace(&out.join("trace.csv"), &trace)?;

    let posterior_auc = match truth {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| TracerError::io(p, e))?;
            let truth: GroundTruth = serde_json::from_str(&text).map_err(|e| TracerError::Schema(format!("truth file: {e}")))?;
            if truth.s_current.len() != cur.len() {
                return Err(TracerError::Schema("truth file does not match the current cohort".into()));
            }
            let post = em::e_step(&artifact.params, &cur)?;
            let s: Vec<f64> = truth.s_current.iter().map(|&v| v as f64).collect();
            Some(auc(&post, &s)?)
        }
        None => None,
    };
    let summary = FitSummary {
        converged: trace.converged,
        iterations: trace.iterations,
        lambda1: trace.lambda1,
        lambda2: trace.lambda2,
        delta_l1: artifact.params.delta.iter().map(|d| d.abs()).sum(),
        flags: trace.flags.clone(),
        posterior_auc,
        ensemble_fitted: artifact.ensemble.is_some(),
    };
    write_json(&out.join("fit_summary.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_predict(model: &Path, data: &Path, out: &Path) -> Result<()> {
    let artifact = ModelArtifact::load(model)?;
    let data = Dataset::read_csv(data)?;
    let p = artifact.predict(&data)?;
    let path = out.join("predictions.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["id", "tracer", "transition", "historical"];
    if p.current.is_some() {
        header.push("current");
    }
    if p.ensemble.is_some() {
        header.push("ensemble");
    }
    w.write_record(&header)?;
    for (i, id) in data.ids().iter().enumerate() {
        let mut rec = vec![
            id.clone(),
            format_float(p.tracer[i]),
            format_float(p.transition[i]),
            format_float(p.historical[i]),
        ];
        if let Some(c) = &p.current {
            rec.push(format_float(c[i]));
        }
        if let Some(e) = &p.ensemble {
            rec.push(format_float(e[i]));
        }
        w.write_record(&rec)?;
    }
    finish(w, &path)?;
    if p.ensemble_clipped > 0 {
        log::warn!("{} ensemble predictions were clipped to [0, 1]", p.ensemble_clipped);
    }
    Ok(())
}

/// Written by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tracer: MetricsReport,
    pub historical: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<MetricsReport>,
    #[serde(default)]
    pub ensemble_clipped: usize,
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, model: &Path, data: &Path, out: &Path) -> Result<EvaluationReport> {
    let artifact = ModelArtifact::load(model)?;
    let data = artifact.align(&Dataset::read_csv(data)?)?;
    let p = artifact.predict(&data)?;
    let labels = data.y_f64();
    let boot = cfg.metrics.bootstrap();
    let report = |preds: &[f64]| MetricsReport::compute(preds, &labels, boot);
    let eval = EvaluationReport {
        tracer: report(&p.tracer)?,
        historical: report(&p.historical)?,
        current: p.current.as_deref().map(report).transpose()?,
        ensemble: p.ensemble.as_deref().map(report).transpose()?,
        ensemble_clipped: p.ensemble_clipped,
    };
    write_json(&out.join("metrics.json"), &eval)?;

    let params = &artifact.params;
    let eta1 = params.eta1();
    let path = out.join("coefficients.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["feature", "eta0", "eta1", "delta"])?;
    for (j, name) in outcome_feature_names(&params.a_names, &params.w_names).into_iter().enumerate() {
        w.write_record([name, format_float(params.eta0[j]), format_float(eta1[j]), format_float(params.delta[j])])?;
    }
    finish(w, &path)?;
    Ok(eval)
}

/// Runs the grid; returns the number of failed replications.
pub fn cmd_grid(cfg: &ExperimentConfig, out: &Path) -> Result<usize> {
    let started = Instant::now();
    let results = run_grid(&cfg.simulation, &cfg.grid, &cfg.grid_fit())?;
    log::info!("grid finished in {:.1?}", started.elapsed());

    let path = out.join("grid_results.csv");
    let mut w = csv_writer(&path)?;
    for row in &results.rows {
        w.serialize(row)?;
    }
    finish(w, &path)?;

    let path = out.join("grid_summary.csv");
    let mut w = csv_writer(&path)?;
    for row in summarize(&cfg.grid, &results.rows) {
        w.serialize(row)?;
    }
    finish(w, &path)?;

    let path = out.join("grid_failures.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["scenario_id", "replication", "message"])?;
    for f in &results.failures {
        w.write_record([f.scenario_id.to_string(), f.replication.to_string(), f.message.clone()])?;
    }
    finish(w, &path)?;
    Ok(results.failures.len())
}

//! Synthetic cohorts with a latent transition and the scenario grid runner.
//!
//! Each record draws `W ~ N(0.1, I)`, a transition flag
//! `S ~ Bernoulli(expit(g0 + slope * sum(W)))` (historical records have
//! `S = 0`), `A = beta_S' [1, W] + N(0, I)` on the active block, independent
//! `N(0, 1)` noise on the zero-coefficient block, and
//! `Y ~ Bernoulli(expit(eta_S' [1, A, W]))`.

use std::collections::BTreeMap;
use std::sync::Mutex;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::em::{fit_from_source, fit_outcome_lasso, EmConfig};
use crate::error::{Result, TracerError};
use crate::glm::{expit, CvConfig};
use crate::metrics::{auc, mse};
use crate::predictor::{predict_dataset, predict_logistic};

/// Generator settings. Sample sizes, dimensions, the outcome coefficients
/// and the prior slope are not pinned down by the method and are choices of
/// this implementation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub n_hist: usize,
    pub n_current: usize,
    pub n_test: usize,
    pub dim_w: usize,
    /// Active `A` columns; the zero-coefficient block is appended after them.
    pub dim_a: usize,
    /// Intercept `g0` of the transition prior.
    pub prior_intercept: f64,
    /// Common slope of the transition prior on every `W` column.
    pub prior_slope: f64,
    pub n_zero_coef: usize,
    /// Shift added to every active outcome slope after the transition.
    pub delta_shift: f64,
    pub seed: u64,
    pub n_replications: usize,
    /// Historical times fall in `[0, T)`, current and test times in `[T, 2T)`.
    #[serde(skip)]
    pub transition_time: i64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_hist: 5000,
            n_current: 500,
            n_test: 2000,
            dim_w: 5,
            dim_a: 5,
            prior_intercept: -3.0,
            prior_slope: 2.0,
            n_zero_coef: 50,
            delta_shift: 0.6,
            seed: 20240101,
            n_replications: 50,
            transition_time: 100,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.n_hist, "n_hist"),
            (self.n_current, "n_current"),
            (self.n_test, "n_test"),
            (self.dim_w, "dim_w"),
            (self.dim_a, "dim_a"),
            (self.n_replications, "n_replications"),
        ] {
            if v == 0 {
                return Err(TracerError::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        for (v, name) in [
            (self.prior_intercept, "prior_intercept"),
            (self.prior_slope, "prior_slope"),
            (self.delta_shift, "delta_shift"),
        ] {
            if !v.is_finite() {
                return Err(TracerError::InvalidArgument(format!("{name} must be finite")));
            }
        }
        if self.transition_time <= 0 {
            return Err(TracerError::InvalidArgument("transition_time must be positive".into()));
        }
        Ok(())
    }

    pub fn total_a(&self) -> usize {
        self.dim_a + self.n_zero_coef
    }

    pub fn w_names(&self) -> Vec<String> {
        (0..self.dim_w).map(|j| format!("w_{j}")).collect()
    }

    pub fn a_names(&self) -> Vec<String> {
        (0..self.total_a()).map(|j| format!("a_{j}")).collect()
    }

    pub fn truth(&self) -> TrueParameters {
        let (dw, da, nz) = (self.dim_w, self.dim_a, self.n_zero_coef);
        let mut gamma = vec![self.prior_slope; dw + 1];
        gamma[0] = self.prior_intercept;
        let beta0 = vec![vec![0.1; da]; dw + 1];
        let mut beta1 = vec![vec![0.3; da]; dw + 1];
        beta1[0] = vec![0.1; da];
        // slopes alternate in sign over the active A block and then W
        let slope = |k: usize| if k % 2 == 0 { 0.5 } else { -0.5 };
        let mut eta0 = vec![-1.0];
        let mut eta1 = vec![-1.0];
        for k in 0..da {
            eta0.push(slope(k));
            eta1.push(slope(k) + self.delta_shift);
        }
        eta0.extend(std::iter::repeat(0.0).take(nz));
        eta1.extend(std::iter::repeat(0.0).take(nz));
        for k in da..da + dw {
            eta0.push(slope(k));
            eta1.push(slope(k) + self.delta_shift);
        }
        TrueParameters {
            gamma,
            beta0,
            beta1,
            eta0,
            eta1,
        }
    }
}

/// Generating parameters. `beta_s[r][k]` is the coefficient of `[1, W]_r`
/// for active `A` column `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueParameters {
    pub gamma: Vec<f64>,
    pub beta0: Vec<Vec<f64>>,
    pub beta1: Vec<Vec<f64>>,
    pub eta0: Vec<f64>,
    pub eta1: Vec<f64>,
}

/// Simulation truth kept apart from the datasets handed to fitting code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub params: TrueParameters,
    pub s_current: Vec<u8>,
    pub s_test: Vec<u8>,
    /// True outcome probabilities of the test records.
    pub p_test: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GeneratedCohort {
    pub historical: Dataset,
    pub current: Dataset,
    pub test: Dataset,
    pub truth: GroundTruth,
}

enum Cohort {
    Historical,
    Current,
    Test,
}

struct Drawn {
    data: Dataset,
    s: Vec<u8>,
    p: Vec<f64>,
}

fn rng_for(seed: u64, replication: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3 * replication as u64 + stream);
    rng
}

fn draw(config: &SimulationConfig, truth: &TrueParameters, kind: Cohort, rng: &mut ChaCha8Rng, prefix: &str) -> Result<Drawn> {
    let n = match kind {
        Cohort::Historical => config.n_hist,
        Cohort::Current => config.n_current,
        Cohort::Test => config.n_test,
    };
    let (dw, da, nz) = (config.dim_w, config.dim_a, config.n_zero_coef);
    let t = config.transition_time;
    let mut w = DMatrix::zeros(n, dw);
    let mut a = DMatrix::zeros(n, da + nz);
    let mut time = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    let mut wr = vec![0.0; dw];
    let mut x = vec![0.0; da + nz + dw];
    for i in 0..n {
        for (j, v) in wr.iter_mut().enumerate() {
            *v = 0.1 + rng.sample::<f64, _>(StandardNormal);
            w[(i, j)] = *v;
        }
        let u: f64 = rng.gen();
        let state = match kind {
            Cohort::Historical => 0u8,
            _ => (u < expit(truth.gamma[0] + truth.gamma[1..].iter().zip(&wr).map(|(g, v)| g * v).sum::<f64>())) as u8,
        };
        let beta = if state == 1 { &truth.beta1 } else { &truth.beta0 };
        for k in 0..da {
            let mean = beta[0][k] + (0..dw).map(|r| beta[r + 1][k] * wr[r]).sum::<f64>();
            a[(i, k)] = mean + rng.sample::<f64, _>(StandardNormal);
        }
        for k in da..da + nz {
            a[(i, k)] = rng.sample(StandardNormal);
        }
        for k in 0..da + nz {
            x[k] = a[(i, k)];
        }
        x[da + nz..].copy_from_slice(&wr);
        let eta = if state == 1 { &truth.eta1 } else { &truth.eta0 };
        let prob = expit(eta[0] + eta[1..].iter().zip(&x).map(|(c, v)| c * v).sum::<f64>());
        let u: f64 = rng.gen();
        y.push((u < prob) as u8);
        let offset = match kind {
            Cohort::Historical => 0,
            _ => t,
        };
        time.push(offset + rng.gen_range(0..t));
        s.push(state);
        p.push(prob);
    }
    let ids = (0..n).map(|i| format!("{prefix}{i}")).collect();
    let data = Dataset::new(ids, time, y, w, a, config.w_names(), config.a_names())?;
    Ok(Drawn { data, s, p })
}

/// The historical cohort of a replication. It depends on neither the prior
/// intercept nor the shift, so grid cells sharing a replication reuse it.
pub fn generate_historical(config: &SimulationConfig, replication: usize) -> Result<Dataset> {
    config.validate()?;
    let truth = config.truth();
    let mut rng = rng_for(config.seed, replication, 0);
    Ok(draw(config, &truth, Cohort::Historical, &mut rng, "h")?.data)
}

/// Draws one replication. The same `(seed, replication)` always yields the
/// same cohorts, independently of other replications.
pub fn generate(config: &SimulationConfig, replication: usize) -> Result<GeneratedCohort> {
    let historical = generate_historical(config, replication)?;
    let truth = config.truth();
    let current = draw(config, &truth, Cohort::Current, &mut rng_for(config.seed, replication, 1), "c")?;
    let test = draw(config, &truth, Cohort::Test, &mut rng_for(config.seed, replication, 2), "t")?;
    Ok(GeneratedCohort {
        historical,
        current: current.data,
        test: test.data,
        truth: GroundTruth {
            params: truth,
            s_current: current.s,
            s_test: test.s,
            p_test: test.p,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub prior_intercepts: Vec<f64>,
    pub n_zero_coefs: Vec<usize>,
    pub delta_shifts: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            prior_intercepts: vec![-3.0, -4.0, -5.0],
            n_zero_coefs: vec![50, 100],
            delta_shifts: vec![0.2, 0.4, 0.6],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: usize,
    pub g0: f64,
    pub n_zero: usize,
    pub delta: f64,
}

impl GridSpec {
    /// Cells in `(g0, n_zero, delta)` lexicographic order.
    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut out = Vec::new();
        for &g0 in &self.prior_intercepts {
            for &n_zero in &self.n_zero_coefs {
                for &delta in &self.delta_shifts {
                    out.push(Scenario {
                        scenario_id: out.len(),
                        g0,
                        n_zero,
                        delta,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Fitted on historical data only.
    Source,
    /// Fitted on current data only.
    Mixed,
    Tracer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Source, ModelKind::Mixed, ModelKind::Tracer];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Source => "source",
            ModelKind::Mixed => "mixed",
            ModelKind::Tracer => "tracer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub scenario_id: usize,
    pub g0: f64,
    pub n_zero: usize,
    pub delta: f64,
    pub replication: usize,
    pub model: ModelKind,
    pub auc: f64,
    /// Mean squared error of predicted probabilities against observed outcomes.
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub scenario_id: usize,
    pub replication: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario_id: usize,
    pub g0: f64,
    pub n_zero: usize,
    pub delta: f64,
    pub model: ModelKind,
    pub n: usize,
    pub auc_mean: f64,
    pub auc_sd: f64,
    pub mse_mean: f64,
    pub mse_sd: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridResults {
    pub rows: Vec<GridRow>,
    pub failures: Vec<GridFailure>,
    /// TRACER fit flags per `(scenario, replication)`.
    pub tracer_flags: Vec<(usize, usize, Vec<String>)>,
}

/// Settings shared by every fit in a grid run.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GridFitConfig {
    pub em: EmConfig,
    /// CV settings for the source and mixed baselines.
    pub cv: CvConfig,
}

/// Model performance of one replication of one cell.
pub fn run_replication(
    scenario: &Scenario,
    config: &SimulationConfig,
    replication: usize,
    historical: &Dataset,
    source_eta: &[f64],
    fit: &GridFitConfig,
) -> Result<(Vec<GridRow>, Vec<String>)> {
    let truth = config.truth();
    let current = draw(config, &truth, Cohort::Current, &mut rng_for(config.seed, replication, 1), "c")?.data;
    let test = draw(config, &truth, Cohort::Test, &mut rng_for(config.seed, replication, 2), "t")?.data;
    let labels = test.y_f64();

    let mut em = fit.em.clone();
    em.transition_time = config.transition_time;
    let (params, trace) = fit_from_source(historical, &current, source_eta.to_vec(), &em)?;
    let tracer = predict_dataset(&params, &test)?.probability;
    let source = predict_logistic(source_eta, &test)?;
    let mixed = if current.has_both_classes() {
        let (eta, _) = fit_outcome_lasso(&current, None, fit.em.standardize, &fit.cv)?;
        predict_logistic(&eta, &test)?
    } else {
        return Err(TracerError::SingleClass("current cohort outcomes".into()));
    };
    let mut rows = Vec::with_capacity(3);
    for (model, preds) in [(ModelKind::Source, &source), (ModelKind::Mixed, &mixed), (ModelKind::Tracer, &tracer)] {
        rows.push(GridRow {
            scenario_id: scenario.scenario_id,
            g0: scenario.g0,
            n_zero: scenario.n_zero,
            delta: scenario.delta,
            replication,
            model,
            auc: auc(preds, &labels)?,
            mse: mse(preds, &labels)?,
        });
    }
    let mut flags = trace.flags;
    if !trace.converged {
        flags.push("EM did not converge".into());
    }
    Ok((rows, flags))
}

/// Runs every cell of `grid` for `base.n_replications` replications.
/// Failures are recorded per replication and never abort the run; output
/// order is fixed by `(scenario, replication)` whatever the scheduling.
pub fn run_grid(base: &SimulationConfig, grid: &GridSpec, fit: &GridFitConfig) -> Result<GridResults> {
    base.validate()?;
    let scenarios = grid.scenarios();
    let reps = base.n_replications;

    // the historical cohort and its model depend only on (n_zero, replication)
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for &nz in &grid.n_zero_coefs {
        for r in 0..reps {
            if !keys.contains(&(nz, r)) {
                keys.push((nz, r));
            }
        }
    }
    let mut em = fit.em.clone();
    em.transition_time = base.transition_time;
    let sources: BTreeMap<(usize, usize), std::result::Result<(Dataset, Vec<f64>), String>> = keys
        .par_iter()
        .map(|&(nz, r)| {
            let cfg = SimulationConfig {
                n_zero_coef: nz,
                ..base.clone()
            };
            let out = generate_historical(&cfg, r).and_then(|h| {
                let (eta, _) = crate::em::fit_historical(&h, &em)?;
                Ok((h, eta))
            });
            ((nz, r), out.map_err(|e| e.to_string()))
        })
        .collect();

    let tasks: Vec<(usize, usize)> = (0..scenarios.len()).flat_map(|c| (0..reps).map(move |r| (c, r))).collect();
    let done = Mutex::new(0usize);
    let outcomes: Vec<std::result::Result<(Vec<GridRow>, Vec<String>), String>> = tasks
        .par_iter()
        .map(|&(c, r)| {
            let sc = &scenarios[c];
            let cfg = SimulationConfig {
                prior_intercept: sc.g0,
                n_zero_coef: sc.n_zero,
                delta_shift: sc.delta,
                ..base.clone()
            };
            let out = match &sources[&(sc.n_zero, r)] {
                Ok((h, eta)) => run_replication(sc, &cfg, r, h, eta, fit).map_err(|e| e.to_string()),
                Err(e) => Err(format!("historical fit failed: {e}")),
            };
            let mut d = done.lock().unwrap_or_else(|e| e.into_inner());
            *d += 1;
            if *d % 50 == 0 {
                log::info!("grid: {}/{} replications done", *d, tasks.len());
            }
            out
        })
        .collect();

    let mut results = GridResults::default();
    for (&(c, r), out) in tasks.iter().zip(outcomes) {
        match out {
            Ok((rows, flags)) => {
                results.rows.extend(rows);
                if !flags.is_empty() {
                    results.tracer_flags.push((c, r, flags));
                }
            }
            Err(message) => {
                log::warn!("scenario {c} replication {r} failed: {message}");
                results.failures.push(GridFailure {
                    scenario_id: c,
                    replication: r,
                    message,
                });
            }
        }
    }
    Ok(results)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Mean and sample standard deviation per `(cell, model)`.
pub fn summarize(grid: &GridSpec, rows: &[GridRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for sc in grid.scenarios() {
        for model in ModelKind::ALL {
            let sel: Vec<&GridRow> = rows.iter().filter(|r| r.scenario_id == sc.scenario_id && r.model == model).collect();
            let aucs: Vec<f64> = sel.iter().map(|r| r.auc).collect();
            let mses: Vec<f64> = sel.iter().map(|r| r.mse).collect();
            let (auc_mean, auc_sd) = mean_sd(&aucs);
            let (mse_mean, mse_sd) = mean_sd(&mses);
            out.push(SummaryRow {
                scenario_id: sc.scenario_id,
                g0: sc.g0,
                n_zero: sc.n_zero,
                delta: sc.delta,
                model,
                n: sel.len(),
                auc_mean,
                auc_sd,
                mse_mean,
                mse_sd,
            });
        }
    }
    out
}

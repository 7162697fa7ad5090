//! EM estimation of latent transition membership with a weighted
//! transfer-lasso update of the post-transition outcome model.
//!
//! The complete-data model for record `i` is
//!
//! ```text
//! P(S_i = 1 | W_i)        = expit(gamma' [1, W_i])        (0 when t_i < T)
//! A_i | W_i, S_i = s      ~ N(beta_s' [1, W_i], Sigma_s)
//! P(Y_i = 1 | X_i, S_i=s) = expit(eta_s' X_i),  X_i = [1, A_i, W_i]
//! eta_1 = eta_0 + delta
//! ```
//!
//! `eta_0` is fitted once on historical data and stays frozen. Historical
//! records may be included in the EM sample (`anchor_history`): their time
//! gate pins the posterior to zero, so they inform the pre-transition
//! covariate model without touching `gamma` or `delta`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariate::{fit_dim_reducer, fit_dim_reducer_warm, fit_state_model, DimReducer, GaussianCondModel};
use crate::dataset::Dataset;
use crate::error::{Result, TracerError};
use crate::glm::{
    cv_logistic_lasso, fit_logistic, fit_logistic_newton, log_expit, logistic_loss, logit, CvConfig,
    DesignMatrix, GlmFit, PenaltyConfig, SolverOptions,
};

/// Fitted parameters of the transition mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TracerParams {
    /// Transition prior over `[1, W]`.
    pub gamma: Vec<f64>,
    /// Covariate model before the transition.
    pub cond0: GaussianCondModel,
    /// Covariate model after the transition.
    pub cond1: GaussianCondModel,
    /// Historical outcome coefficients over `[1, A, W]`; frozen during EM.
    pub eta0: Vec<f64>,
    /// Shift of the outcome coefficients after the transition.
    pub delta: Vec<f64>,
    pub reducer: Option<DimReducer>,
    /// Records with `time < transition_time` have zero transition prior.
    pub transition_time: i64,
    pub w_names: Vec<String>,
    pub a_names: Vec<String>,
}

impl TracerParams {
    pub fn eta1(&self) -> Vec<f64> {
        self.eta0.iter().zip(&self.delta).map(|(a, d)| a + d).collect()
    }

    pub fn dim_w(&self) -> usize {
        self.w_names.len()
    }

    pub fn dim_a(&self) -> usize {
        self.a_names.len()
    }

    pub fn is_gated(&self, time: i64) -> bool {
        time < self.transition_time
    }

    /// The covariate vector the state models are defined on: the reducer
    /// score when a reducer is active, otherwise `a` itself.
    pub fn covariate_repr(&self, a: &[f64]) -> Vec<f64> {
        match &self.reducer {
            Some(r) if r.active => vec![r.score(a)],
            _ => a.to_vec(),
        }
    }

    /// `(ln P(S=1 | w), ln P(S=0 | w))`, honoring the time gate.
    pub fn log_prior(&self, w: &[f64], time: i64) -> (f64, f64) {
        if self.is_gated(time) {
            return (f64::NEG_INFINITY, 0.0);
        }
        let z = linear(&self.gamma, w);
        (log_expit(z), log_expit(-z))
    }

    /// `(ln f(a | w, S=1), ln f(a | w, S=0))`.
    pub fn log_covariate(&self, w: &[f64], a: &[f64]) -> (f64, f64) {
        let repr = self.covariate_repr(a);
        (self.cond1.log_density(&repr, w), self.cond0.log_density(&repr, w))
    }

    /// Checks that a dataset has this model's feature layout.
    pub fn check_layout(&self, data: &Dataset) -> Result<()> {
        if data.w_names() != self.w_names.as_slice() || data.a_names() != self.a_names.as_slice() {
            return Err(TracerError::Schema(format!(
                "feature layout differs from the model: model w={:?} a={:?}, data w={:?} a={:?}",
                self.w_names,
                self.a_names,
                data.w_names(),
                data.a_names()
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let (dw, da) = (self.dim_w(), self.dim_a());
        let repr = match &self.reducer {
            Some(r) if r.active => {
                if r.coefficients.len() != da + 1 {
                    return Err(TracerError::Dimension("reducer coefficient count".into()));
                }
                1
            }
            _ => da,
        };
        let p = 1 + da + dw;
        if self.gamma.len() != dw + 1
            || self.eta0.len() != p
            || self.delta.len() != p
            || self.cond0.dim_w() != dw
            || self.cond1.dim_w() != dw
            || self.cond0.dim_a() != repr
            || self.cond1.dim_a() != repr
        {
            return Err(TracerError::Dimension(format!(
                "inconsistent parameter dimensions for dim_w={dw}, dim_a={da}"
            )));
        }
        Ok(())
    }
}

/// `c[0] + c[1..]' x`.
#[inline]
pub(crate) fn linear(c: &[f64], x: &[f64]) -> f64 {
    c[0] + c[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitStrategy {
    /// Independent Bernoulli(p) draws for every ungated record.
    RandomBernoulli { p: f64, seed: u64 },
    /// Caller-supplied initial memberships in `[0, 1]`, one per current record.
    ProxyLabels { labels: Vec<f64> },
    /// Initial memberships read from a feature column of the current data.
    ProxyColumn { column: String },
    /// Start from previously fitted parameters.
    WarmParams { params: Box<TracerParams> },
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::RandomBernoulli { p: 0.5, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Threshold on both the largest parameter change and the mean absolute
    /// posterior change between iterations. An infinite value returns the
    /// initialization without iterating.
    pub tol: f64,
    pub init: InitStrategy,
    /// Set from the experiment-level transition time.
    #[serde(skip)]
    pub transition_time: i64,
    /// Historical lasso strength; `None` selects it by cross-validation.
    pub lambda1: Option<f64>,
    /// Shift lasso strength; `None` selects it by cross-validation at the
    /// first M-step and then holds it fixed.
    pub lambda2: Option<f64>,
    /// Scale penalties by feature standard deviations.
    pub standardize: bool,
    pub cv: CvConfig,
    pub use_dim_reduction: bool,
    /// The reducer is used when `dim_a` exceeds this.
    pub dim_reduction_threshold: usize,
    /// The reducer is refitted each iteration until its largest coefficient
    /// change drops below `reducer_tol` or this many iterations have passed;
    /// afterwards it is frozen.
    pub reducer_refit_iters: usize,
    pub reducer_tol: f64,
    /// Warm-started Newton steps per reducer refit.
    pub reducer_newton_steps: usize,
    /// Include historical records (gated to S = 0) in the EM sample.
    pub anchor_history: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-5,
            init: InitStrategy::default(),
            transition_time: 0,
            lambda1: None,
            lambda2: None,
            standardize: true,
            cv: CvConfig::default(),
            use_dim_reduction: true,
            dim_reduction_threshold: 10,
            reducer_refit_iters: 10,
            reducer_tol: 1e-3,
            reducer_newton_steps: 1,
            anchor_history: true,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(TracerError::InvalidArgument("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(TracerError::InvalidArgument("max_iter must be at least 1".into()));
        }
        for (l, name) in [(self.lambda1, "lambda1"), (self.lambda2, "lambda2")] {
            if let Some(l) = l {
                if !(l >= 0.0) || !l.is_finite() {
                    return Err(TracerError::InvalidArgument(format!("{name} must be finite and >= 0")));
                }
            }
        }
        if let InitStrategy::RandomBernoulli { p, .. } = self.init {
            if !(0.0..=1.0).contains(&p) {
                return Err(TracerError::InvalidArgument("init p must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    fn reduction_active(&self, dim_a: usize) -> bool {
        self.use_dim_reduction && dim_a > self.dim_reduction_threshold
    }
}

/// Per-iteration record of an EM run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Penalized observed-data log-likelihood; entry 0 is the initialization.
    pub loglik: Vec<f64>,
    /// Mean posterior over ungated records; entry 0 is the initial membership.
    pub mean_posterior: Vec<f64>,
    /// Whether the reducer was refitted in that iteration (entry 0: initial fit).
    pub reducer_refit: Vec<bool>,
    pub converged: bool,
    pub iterations: usize,
    pub lambda1: Option<f64>,
    pub lambda2: f64,
    pub flags: Vec<String>,
}

/// Result of [`initialize`].
#[derive(Clone, Debug)]
pub struct Initialization {
    pub params: TracerParams,
    /// Initial memberships over the EM sample (historical rows first when anchored).
    pub memberships: Vec<f64>,
    pub lambda1: Option<f64>,
    pub flags: Vec<String>,
}

/// Prepared arrays shared by every E- and M-step.
pub struct EmProblem {
    n: usize,
    gated: Vec<bool>,
    y: Vec<f64>,
    /// `[1, W]` over all EM rows.
    w_design: DesignMatrix,
    /// Raw `A` over all EM rows.
    a: DMatrix<f64>,
    /// `X eta0` over all EM rows.
    lin0: Vec<f64>,
    /// `[1, A, W]` over ungated rows.
    x_cur: DesignMatrix,
    cur_idx: Vec<usize>,
    /// `[1, W]` over ungated rows, restricted to varying columns.
    w_cur: DesignMatrix,
    w_cols: Vec<usize>,
    delta_factors: Vec<f64>,
    eta0: Vec<f64>,
    transition_time: i64,
    w_names: Vec<String>,
    a_names: Vec<String>,
    reduction: bool,
}

impl EmProblem {
    /// Builds the EM sample from `current` (and `hist`, when given).
    pub fn new(hist: Option<&Dataset>, current: &Dataset, eta0: Vec<f64>, config: &EmConfig) -> Result<Self> {
        let data = match hist {
            Some(h) => h.concat(current)?,
            None => current.clone(),
        };
        let n = data.len();
        let x_all = data.outcome_design();
        if eta0.len() != x_all.cols() {
            return Err(TracerError::Dimension(format!(
                "eta0 has {} coefficients, outcome design has {}",
                eta0.len(),
                x_all.cols()
            )));
        }
        let gated: Vec<bool> = data.time().iter().map(|&t| t < config.transition_time).collect();
        let cur_idx: Vec<usize> = (0..n).filter(|&i| !gated[i]).collect();
        if cur_idx.is_empty() {
            return Err(TracerError::Degenerate(
                "no record is at or after the transition time".into(),
            ));
        }
        let w_design = data.transition_design();
        let x_cur = x_all.select_rows(&cur_idx);
        let w_cur_full = w_design.select_rows(&cur_idx);
        let sd = w_cur_full.weighted_column_sd(&vec![1.0; cur_idx.len()]);
        let w_cols: Vec<usize> = (0..w_cur_full.cols()).filter(|&j| j == 0 || sd[j] > 0.0).collect();
        let w_cur = if w_cols.len() == w_cur_full.cols() {
            w_cur_full
        } else {
            let vals = DMatrix::from_fn(cur_idx.len(), w_cols.len(), |i, j| w_cur_full.values()[(i, w_cols[j])]);
            let names = w_cols.iter().map(|&j| w_cur_full.column_names()[j].clone()).collect();
            DesignMatrix::new(vals, names, Some(0))?
        };
        let mut pen = PenaltyConfig::from_mask(0.0, &vec![true; x_cur.cols()]);
        if config.standardize {
            pen = pen.standardized(&x_cur, &vec![1.0; cur_idx.len()]);
        }
        let lin0 = x_all.linear_predictor(&eta0, &[]);
        Ok(Self {
            n,
            gated,
            y: data.y_f64(),
            a: data.a().clone(),
            lin0,
            w_design,
            x_cur,
            cur_idx,
            w_cur,
            w_cols,
            delta_factors: pen.factors,
            eta0,
            transition_time: config.transition_time,
            w_names: data.w_names().to_vec(),
            a_names: data.a_names().to_vec(),
            reduction: config.reduction_active(data.dim_a()),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn gated(&self) -> &[bool] {
        &self.gated
    }

    /// Indices of ungated rows within the EM sample.
    pub fn current_indices(&self) -> &[usize] {
        &self.cur_idx
    }

    /// Number of rows in the shift-lasso objective.
    pub fn n_current(&self) -> usize {
        self.cur_idx.len()
    }

    pub fn delta_penalty(&self, lambda: f64) -> PenaltyConfig {
        PenaltyConfig {
            lambda,
            factors: self.delta_factors.clone(),
        }
    }

    fn covariate_repr(&self, params: &TracerParams) -> DMatrix<f64> {
        match &params.reducer {
            Some(r) if r.active => r.score_matrix(&self.a),
            _ => self.a.clone(),
        }
    }

    fn log_covariate(&self, cond: &GaussianCondModel, repr: &DMatrix<f64>) -> Vec<f64> {
        let means = self.w_design.values() * cond.beta();
        let d = repr.ncols();
        let mut a = vec![0.0; d];
        let mut m = vec![0.0; d];
        (0..self.n)
            .map(|i| {
                for k in 0..d {
                    a[k] = repr[(i, k)];
                    m[k] = means[(i, k)];
                }
                cond.log_density_with_mean(&a, &m)
            })
            .collect()
    }

    /// Log joint terms `(ln p(y, a, S=1 | w), ln p(y, a, S=0 | w))` per row.
    fn joint_terms(&self, params: &TracerParams) -> (Vec<f64>, Vec<f64>) {
        let repr = self.covariate_repr(params);
        let f1 = self.log_covariate(&params.cond1, &repr);
        let f0 = self.log_covariate(&params.cond0, &repr);
        let prior = self.w_design.linear_predictor(&params.gamma, &[]);
        let shift = self.x_cur.linear_predictor(&params.delta, &[]);
        let mut l1 = vec![f64::NEG_INFINITY; self.n];
        let mut l0 = vec![0.0; self.n];
        for i in 0..self.n {
            l0[i] = -logistic_loss(self.y[i], self.lin0[i]) + f0[i];
        }
        for (k, &i) in self.cur_idx.iter().enumerate() {
            let lin1 = self.lin0[i] + shift[k];
            l1[i] = -logistic_loss(self.y[i], lin1) + f1[i] + log_expit(prior[i]);
            l0[i] += log_expit(-prior[i]);
        }
        (l1, l0)
    }

    /// Posterior `P(S_i = 1 | W_i, A_i, Y_i)` for every EM row.
    pub fn e_step(&self, params: &TracerParams) -> Result<Vec<f64>> {
        let (l1, l0) = self.joint_terms(params);
        let mut post = vec![0.0; self.n];
        for i in 0..self.n {
            if self.gated[i] {
                continue;
            }
            if !l1[i].is_finite() || !l0[i].is_finite() {
                return Err(TracerError::NonFinite {
                    what: "E-step factor",
                    indices: vec![i],
                });
            }
            let m = l1[i].max(l0[i]);
            let (e1, e0) = ((l1[i] - m).exp(), (l0[i] - m).exp());
            post[i] = e1 / (e1 + e0);
        }
        Ok(post)
    }

    /// Penalized observed-data log-likelihood:
    /// `sum_i ln sum_s p(y_i, a_i, S_i = s | w_i) - N_cur * lambda2 * sum_j f_j |delta_j|`.
    pub fn observed_loglik(&self, params: &TracerParams, lambda2: f64) -> f64 {
        let (l1, l0) = self.joint_terms(params);
        let ll: f64 = l1
            .iter()
            .zip(&l0)
            .map(|(a, b)| {
                let m = a.max(*b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .sum();
        ll - self.n_current() as f64 * self.delta_penalty(lambda2).value(&params.delta)
    }

    fn fit_gamma(&self, memberships: &[f64], warm: Option<&[f64]>, flags: &mut Vec<String>) -> Result<Vec<f64>> {
        let p: Vec<f64> = self.cur_idx.iter().map(|&i| memberships[i]).collect();
        let n = p.len() as f64;
        let sum: f64 = p.iter().sum();
        let mut gamma = vec![0.0; self.w_design.cols()];
        if sum <= 0.0 || sum >= n {
            // add-one smoothing for an all-0 or all-1 membership vector
            gamma[0] = logit((sum + 1.0) / (n + 2.0));
            push_flag(flags, "degenerate memberships: smoothed intercept-only transition prior");
            return Ok(gamma);
        }
        if self.w_cols.len() == 1 {
            gamma[0] = logit(sum / n);
            push_flag(flags, "no variation in W: intercept-only transition prior");
            return Ok(gamma);
        }
        let start: Option<Vec<f64>> = warm.map(|g| self.w_cols.iter().map(|&j| g[j]).collect());
        let fit = fit_logistic_newton(
            &self.w_cur,
            &p,
            &vec![1.0; p.len()],
            &vec![0.0; p.len()],
            0.0,
            100,
            start.as_deref(),
        )?;
        if !fit.converged {
            push_flag(flags, "transition prior fit did not converge");
        }
        for (k, &j) in self.w_cols.iter().enumerate() {
            gamma[j] = fit.coefficients[k];
        }
        Ok(gamma)
    }

    fn fit_states(
        &self,
        memberships: &[f64],
        repr: &DMatrix<f64>,
        previous: Option<(&GaussianCondModel, &GaussianCondModel)>,
        flags: &mut Vec<String>,
    ) -> Result<(GaussianCondModel, GaussianCondModel)> {
        let w0: Vec<f64> = memberships.iter().map(|p| 1.0 - p).collect();
        let cond0 = fit_state_model(&self.w_design, repr, &w0);
        let cond1 = fit_state_model(&self.w_design, repr, memberships);
        let prev_ok = |m: &GaussianCondModel| m.dim_a() == repr.ncols();
        let (c0, c1) = match (cond0, cond1) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(TracerError::Degenerate(_)), Ok(b)) => {
                push_flag(flags, EMPTY_STATE);
                let a = previous.map(|p| p.0).filter(|m| prev_ok(m)).unwrap_or(&b).clone();
                (a, b)
            }
            (Ok(a), Err(TracerError::Degenerate(_))) => {
                push_flag(flags, EMPTY_STATE);
                let b = previous.map(|p| p.1).filter(|m| prev_ok(m)).unwrap_or(&a).clone();
                (a, b)
            }
            (Err(TracerError::Degenerate(_)), Err(TracerError::Degenerate(_))) => {
                return Err(TracerError::Degenerate("both latent states are empty".into()))
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        Ok((c0, c1))
    }

    /// Weighted shift lasso with offset `X eta0` and weights `p` over ungated rows.
    pub fn fit_delta(&self, memberships: &[f64], lambda2: f64, warm: Option<&[f64]>) -> Result<GlmFit> {
        let p: Vec<f64> = self.cur_idx.iter().map(|&i| memberships[i]).collect();
        let y: Vec<f64> = self.cur_idx.iter().map(|&i| self.y[i]).collect();
        let off: Vec<f64> = self.cur_idx.iter().map(|&i| self.lin0[i]).collect();
        fit_logistic(&self.x_cur, &y, &p, &off, &self.delta_penalty(lambda2), &SolverOptions::default(), warm)
    }

    /// Cross-validated shift-lasso strength under posterior weights.
    pub fn select_lambda2(&self, memberships: &[f64], cv: &CvConfig) -> Result<f64> {
        let p: Vec<f64> = self.cur_idx.iter().map(|&i| memberships[i]).collect();
        let y: Vec<f64> = self.cur_idx.iter().map(|&i| self.y[i]).collect();
        let off: Vec<f64> = self.cur_idx.iter().map(|&i| self.lin0[i]).collect();
        Ok(cv_logistic_lasso(&self.x_cur, &y, &p, &off, &self.delta_factors, cv)?.lambda)
    }

    /// One M-step. `lambda2` is selected by CV on first use when unset.
    pub fn m_step(
        &self,
        memberships: &[f64],
        params: &TracerParams,
        reducer_steps: usize,
        lambda2: &mut Option<f64>,
        cv: &CvConfig,
        flags: &mut Vec<String>,
    ) -> Result<TracerParams> {
        if memberships.len() != self.n {
            return Err(TracerError::Dimension("posterior length".into()));
        }
        let mut next = params.clone();
        if self.reduction && reducer_steps > 0 {
            next.reducer = Some(fit_dim_reducer_warm(&self.a, memberships, params.reducer.as_ref(), reducer_steps)?);
        }
        next.gamma = self.fit_gamma(memberships, Some(&params.gamma), flags)?;
        let repr = self.covariate_repr(&next);
        let reuse = if next.reducer == params.reducer {
            Some((&params.cond0, &params.cond1))
        } else {
            None
        };
        let (c0, c1) = self.fit_states(memberships, &repr, reuse, flags)?;
        next.cond0 = c0;
        next.cond1 = c1;

        let mass: f64 = self.cur_idx.iter().map(|&i| memberships[i]).sum();
        if mass <= 0.0 {
            push_flag(flags, "no transitioned mass: delta unchanged");
            return Ok(next);
        }
        let lam = match *lambda2 {
            Some(l) => l,
            None => {
                let l = self.select_lambda2(memberships, cv)?;
                *lambda2 = Some(l);
                l
            }
        };
        let fit = self.fit_delta(memberships, lam, Some(&params.delta))?;
        if !fit.converged {
            push_flag(flags, "shift lasso did not converge");
        }
        next.delta = fit.coefficients;
        Ok(next)
    }

    fn mean_current(&self, memberships: &[f64]) -> f64 {
        self.cur_idx.iter().map(|&i| memberships[i]).sum::<f64>() / self.cur_idx.len() as f64
    }

    /// Builds initial parameters from initial memberships over the EM sample.
    pub fn params_from_memberships(&self, memberships: &[f64], flags: &mut Vec<String>) -> Result<TracerParams> {
        let reducer = if self.reduction {
            Some(fit_dim_reducer(&self.a, memberships)?)
        } else {
            None
        };
        let gamma = self.fit_gamma(memberships, None, flags)?;
        let mut params = TracerParams {
            gamma,
            cond0: GaussianCondModel::new(DMatrix::zeros(self.w_design.cols(), 1), DMatrix::identity(1, 1))?,
            cond1: GaussianCondModel::new(DMatrix::zeros(self.w_design.cols(), 1), DMatrix::identity(1, 1))?,
            eta0: self.eta0.clone(),
            delta: vec![0.0; self.eta0.len()],
            reducer,
            transition_time: self.transition_time,
            w_names: self.w_names.clone(),
            a_names: self.a_names.clone(),
        };
        let repr = self.covariate_repr(&params);
        let (c0, c1) = self.fit_states(memberships, &repr, None, flags)?;
        params.cond0 = c0;
        params.cond1 = c1;
        Ok(params)
    }
}

const EMPTY_STATE: &str = "a latent state carries no mass: covariate model carried over";

fn push_flag(flags: &mut Vec<String>, msg: &str) {
    if !flags.iter().any(|f| f == msg) {
        flags.push(msg.to_string());
    }
}

/// Lasso logistic fit of the historical outcome model, with CV-selected
/// strength when `lambda1` is `None`. Returns coefficients and the strength used.
pub fn fit_historical(hist: &Dataset, config: &EmConfig) -> Result<(Vec<f64>, f64)> {
    if !hist.has_both_classes() {
        return Err(TracerError::SingleClass("historical outcomes".into()));
    }
    fit_outcome_lasso(hist, config.lambda1, config.standardize, &config.cv)
}

/// Lasso logistic regression of `y` on `[1, A, W]` with an unpenalized intercept.
pub fn fit_outcome_lasso(
    data: &Dataset,
    lambda: Option<f64>,
    standardize: bool,
    cv: &CvConfig,
) -> Result<(Vec<f64>, f64)> {
    let x = data.outcome_design();
    let y = data.y_f64();
    let n = data.len();
    let ones = vec![1.0; n];
    let zeros = vec![0.0; n];
    let mut pen = PenaltyConfig::lasso(0.0, &x);
    if standardize {
        pen = pen.standardized(&x, &ones);
    }
    match lambda {
        Some(l) => {
            let fit = fit_logistic(&x, &y, &ones, &zeros, &pen.with_lambda(l), &SolverOptions::default(), None)?;
            Ok((fit.coefficients, l))
        }
        None => {
            let res = cv_logistic_lasso(&x, &y, &ones, &zeros, &pen.factors, cv)?;
            Ok((res.fit.coefficients, res.lambda))
        }
    }
}

fn initial_memberships(problem: &EmProblem, current: &Dataset, init: &InitStrategy) -> Result<Vec<f64>> {
    let mut s = vec![0.0; problem.len()];
    let offset = problem.len() - current.len();
    let assign = |s: &mut Vec<f64>, labels: &[f64]| -> Result<()> {
        if labels.len() != current.len() {
            return Err(TracerError::Dimension(format!(
                "{} proxy labels for {} current records",
                labels.len(),
                current.len()
            )));
        }
        if let Some(i) = labels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(TracerError::InvalidArgument(format!("proxy label {i} outside [0, 1]")));
        }
        for (k, v) in labels.iter().enumerate() {
            if !problem.gated[offset + k] {
                s[offset + k] = *v;
            }
        }
        Ok(())
    };
    match init {
        InitStrategy::RandomBernoulli { p, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for i in 0..problem.len() {
                let draw: f64 = rng.gen();
                if !problem.gated[i] && draw < *p {
                    s[i] = 1.0;
                }
            }
        }
        InitStrategy::ProxyLabels { labels } => assign(&mut s, labels)?,
        InitStrategy::ProxyColumn { column } => {
            let labels = current
                .feature(column)
                .ok_or_else(|| TracerError::Schema(format!("proxy column {column:?} not found")))?;
            assign(&mut s, &labels)?
        }
        InitStrategy::WarmParams { .. } => unreachable!("handled by caller"),
    }
    Ok(s)
}

fn build_problem(
    hist: &Dataset,
    current: &Dataset,
    eta0: Vec<f64>,
    config: &EmConfig,
) -> Result<EmProblem> {
    if current.is_empty() {
        return Err(TracerError::Degenerate("current data is empty".into()));
    }
    if hist.w_names() != current.w_names() || hist.a_names() != current.a_names() {
        return Err(TracerError::Schema(
            "historical and current data have different feature columns".into(),
        ));
    }
    EmProblem::new(config.anchor_history.then_some(hist), current, eta0, config)
}

/// Fits the historical model and builds starting parameters.
pub fn initialize(hist: &Dataset, current: &Dataset, config: &EmConfig) -> Result<Initialization> {
    config.validate()?;
    let (eta0, lambda1) = fit_historical(hist, config)?;
    let problem = build_problem(hist, current, eta0, config)?;
    initialize_problem(&problem, current, config, Some(lambda1))
}

fn initialize_problem(
    problem: &EmProblem,
    current: &Dataset,
    config: &EmConfig,
    lambda1: Option<f64>,
) -> Result<Initialization> {
    let mut flags = Vec::new();
    if let InitStrategy::WarmParams { params } = &config.init {
        params.validate()?;
        if params.w_names != problem.w_names || params.a_names != problem.a_names {
            return Err(TracerError::Schema("warm parameters have a different feature layout".into()));
        }
        let mut params = (**params).clone();
        params.eta0 = problem.eta0.clone();
        params.transition_time = problem.transition_time;
        if problem.reduction != params.reducer.as_ref().is_some_and(|r| r.active) {
            return Err(TracerError::Schema("warm parameters disagree on dimension reduction".into()));
        }
        let memberships = problem.e_step(&params)?;
        return Ok(Initialization {
            params,
            memberships,
            lambda1,
            flags,
        });
    }
    let memberships = initial_memberships(problem, current, &config.init)?;
    let params = problem.params_from_memberships(&memberships, &mut flags)?;
    Ok(Initialization {
        params,
        memberships,
        lambda1,
        flags,
    })
}

/// Full EM fit: historical model, initialization, then alternating E- and
/// M-steps until convergence or `max_iter`.
pub fn fit(hist: &Dataset, current: &Dataset, config: &EmConfig) -> Result<(TracerParams, EmTrace)> {
    fit_observed(hist, current, None, config, |_, _, _| {})
}

/// As [`fit`], reusing an already fitted historical model.
pub fn fit_from_source(
    hist: &Dataset,
    current: &Dataset,
    eta0: Vec<f64>,
    config: &EmConfig,
) -> Result<(TracerParams, EmTrace)> {
    fit_observed(hist, current, Some((eta0, None)), config, |_, _, _| {})
}

/// As [`fit`], calling `observer(iteration, params, loglik)` after the
/// initialization (iteration 0) and after every M-step.
pub fn fit_observed<F>(
    hist: &Dataset,
    current: &Dataset,
    source: Option<(Vec<f64>, Option<f64>)>,
    config: &EmConfig,
    mut observer: F,
) -> Result<(TracerParams, EmTrace)>
where
    F: FnMut(usize, &TracerParams, f64),
{
    config.validate()?;
    let (eta0, lambda1) = match source {
        Some((eta0, l1)) => (eta0, l1),
        None => {
            let (eta0, l1) = fit_historical(hist, config)?;
            (eta0, Some(l1))
        }
    };
    let problem = build_problem(hist, current, eta0, config)?;
    let init = initialize_problem(&problem, current, config, lambda1)?;
    let mut flags = init.flags;
    let mut params = init.params;
    let mut lambda2 = config.lambda2;
    let mut trace = EmTrace {
        lambda1: init.lambda1,
        ..Default::default()
    };
    let ll0 = problem.observed_loglik(&params, lambda2.unwrap_or(0.0));
    trace.loglik.push(ll0);
    trace.mean_posterior.push(problem.mean_current(&init.memberships));
    trace.reducer_refit.push(params.reducer.is_some());
    observer(0, &params, ll0);

    if !config.tol.is_finite() {
        // nothing can fail an infinite tolerance: the initialization is final
        trace.converged = true;
        trace.lambda2 = lambda2.unwrap_or(f64::NAN);
        trace.flags = flags;
        return Ok((params, trace));
    }

    let mut previous_post = init.memberships;
    // warm parameters arrive with a settled reducer
    let mut reducer_frozen = matches!(config.init, InitStrategy::WarmParams { .. }) || !problem.reduction;
    for it in 1..=config.max_iter {
        let post = problem.e_step(&params)?;
        let refit = !reducer_frozen && it <= config.reducer_refit_iters;
        let steps = if refit { config.reducer_newton_steps.max(1) } else { 0 };
        let next = problem.m_step(&post, &params, steps, &mut lambda2, &config.cv, &mut flags)?;
        if refit {
            let moved = match (&params.reducer, &next.reducer) {
                (Some(a), Some(b)) => a
                    .coefficients
                    .iter()
                    .zip(&b.coefficients)
                    .fold(0.0f64, |m, (x, y)| m.max((x - y).abs())),
                _ => f64::INFINITY,
            };
            reducer_frozen = moved < config.reducer_tol || it == config.reducer_refit_iters;
        }
        let lam = lambda2.unwrap_or(0.0);
        let ll = problem.observed_loglik(&next, lam);
        let change = parameter_change(&params, &next);
        let post_change = problem
            .cur_idx
            .iter()
            .map(|&i| (post[i] - previous_post[i]).abs())
            .sum::<f64>()
            / problem.n_current() as f64;
        trace.loglik.push(ll);
        trace.mean_posterior.push(problem.mean_current(&post));
        trace.reducer_refit.push(refit);
        trace.iterations = it;
        observer(it, &next, ll);
        params = next;
        previous_post = post;
        if !refit && change < config.tol && post_change < config.tol {
            trace.converged = true;
            break;
        }
    }
    if !trace.converged {
        log::warn!("EM did not converge in {} iterations", config.max_iter);
    }
    trace.lambda2 = lambda2.unwrap_or(f64::NAN);
    trace.flags = flags;
    Ok((params, trace))
}

/// Largest absolute change across `gamma`, `delta` and both covariate regressions.
pub fn parameter_change(a: &TracerParams, b: &TracerParams) -> f64 {
    let mut m = 0.0f64;
    for (x, y) in a.gamma.iter().zip(&b.gamma).chain(a.delta.iter().zip(&b.delta)) {
        m = m.max((x - y).abs());
    }
    for (ca, cb) in [(&a.cond0, &b.cond0), (&a.cond1, &b.cond1)] {
        if ca.beta().shape() != cb.beta().shape() {
            return f64::INFINITY;
        }
        for (x, y) in ca.beta().iter().zip(cb.beta().iter()) {
            m = m.max((x - y).abs());
        }
    }
    m
}

/// Posterior transition probabilities `P(S = 1 | W, A, Y)` for a dataset.
pub fn e_step(params: &TracerParams, data: &Dataset) -> Result<Vec<f64>> {
    params.validate()?;
    params.check_layout(data)?;
    let x = data.outcome_design();
    let lin0 = x.linear_predictor(&params.eta0, &[]);
    let lin1 = x.linear_predictor(&params.eta1(), &[]);
    let y = data.y_f64();
    (0..data.len())
        .map(|i| {
            let time = data.time()[i];
            if params.is_gated(time) {
                return Ok(0.0);
            }
            let (w, a) = (data.w_row(i), data.a_row(i));
            let (p1, p0) = params.log_prior(&w, time);
            let (f1, f0) = params.log_covariate(&w, &a);
            let l1 = -logistic_loss(y[i], lin1[i]) + f1 + p1;
            let l0 = -logistic_loss(y[i], lin0[i]) + f0 + p0;
            if !l1.is_finite() || !l0.is_finite() {
                return Err(TracerError::NonFinite {
                    what: "E-step factor",
                    indices: vec![i],
                });
            }
            let m = l1.max(l0);
            let (e1, e0) = ((l1 - m).exp(), (l0 - m).exp());
            Ok(e1 / (e1 + e0))
        })
        .collect()
}

/// One M-step on current data alone. `config.lambda2 = None` selects the
/// shift strength by cross-validation under the given posteriors.
pub fn m_step(
    posteriors: &[f64],
    current: &Dataset,
    params: &TracerParams,
    config: &EmConfig,
) -> Result<TracerParams> {
    params.validate()?;
    params.check_layout(current)?;
    let mut cfg = config.clone();
    cfg.transition_time = params.transition_time;
    let problem = EmProblem::new(None, current, params.eta0.clone(), &cfg)?;
    let mut lambda2 = config.lambda2;
    let mut flags = Vec::new();
    let steps = if problem.reduction { config.reducer_newton_steps.max(1) } else { 0 };
    problem.m_step(posteriors, params, steps, &mut lambda2, &config.cv, &mut flags)
}

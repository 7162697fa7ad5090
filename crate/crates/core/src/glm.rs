//! Weighted, offset-aware penalized GLM fitting.
//!
//! The logistic solver is an IRLS outer loop whose quadratic subproblem is
//! solved by cyclic coordinate descent with soft-thresholding. Each outer
//! step is followed by a backtracking line search on the exact penalized
//! objective, so the recorded objective trace never increases.
//!
//! Objective minimized by [`fit_logistic`]:
//!
//! ```text
//! (1/N) * sum_i w_i * l(y_i, offset_i + x_i' b) + lambda * sum_j f_j |b_j| + (l2/2) * sum_{f_j>0} b_j^2
//! ```
//!
//! where `l` is the logistic negative log-likelihood and `f_j` are the
//! per-coefficient penalty factors (`0` leaves a coefficient unpenalized).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Result, TracerError};

/// Working probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` inside IRLS.
pub const PROB_CLIP: f64 = 1e-10;

/// Ridge jitter used when a weighted Gram matrix is (numerically) singular.
pub const RIDGE_JITTER: f64 = 1e-8;

/// Regularization added to every covariance before a density is evaluated.
pub const COV_EPS: f64 = 1e-8;

/// Logistic function, stable for arbitrarily large `|z|`.
#[inline]
pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(expit(z))` without overflow.
#[inline]
pub fn log_expit(z: f64) -> f64 {
    -softplus(-z)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic negative log-likelihood of a target in `[0, 1]` at linear predictor `eta`.
#[inline]
pub fn logistic_loss(y: f64, eta: f64) -> f64 {
    softplus(eta) - y * eta
}

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Dense column-major design matrix with named columns.
///
/// An intercept column, if present, is supplied by the caller and flagged by
/// index; nothing is added implicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    column_names: Vec<String>,
    intercept: Option<usize>,
}

impl DesignMatrix {
    pub fn new(
        values: DMatrix<f64>,
        column_names: Vec<String>,
        intercept: Option<usize>,
    ) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(TracerError::Dimension(format!(
                "design matrix must have at least one row and column, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if column_names.len() != values.ncols() {
            return Err(TracerError::Dimension(format!(
                "{} column names for {} columns",
                column_names.len(),
                values.ncols()
            )));
        }
        if let Some(j) = intercept {
            if j >= values.ncols() {
                return Err(TracerError::Dimension(format!(
                    "intercept index {j} out of range"
                )));
            }
        }
        check_finite("design matrix", values.as_slice())?;
        Ok(Self {
            values,
            column_names,
            intercept,
        })
    }

    /// Prepends a column of ones (flagged as the intercept) to `features`.
    pub fn with_intercept(features: &DMatrix<f64>, names: &[String]) -> Result<Self> {
        let n = features.nrows();
        let mut values = DMatrix::from_element(n, features.ncols() + 1, 1.0);
        values.columns_mut(1, features.ncols()).copy_from(features);
        let mut column_names = Vec::with_capacity(names.len() + 1);
        column_names.push("(intercept)".to_string());
        column_names.extend(names.iter().cloned());
        Self::new(values, column_names, Some(0))
    }

    /// Builds a matrix from row vectors, with generated column names.
    pub fn from_rows(rows: &[Vec<f64>], intercept: Option<usize>) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(TracerError::Dimension("ragged rows".into()));
        }
        let values = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        let names = (0..p).map(|j| format!("x{j}")).collect();
        Self::new(values, names, intercept)
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn intercept(&self) -> Option<usize> {
        self.intercept
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.rows();
        &self.values.as_slice()[j * n..(j + 1) * n]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols()).map(|j| self.values[(i, j)]).collect()
    }

    /// `X b + offset` (offset may be empty for none).
    pub fn linear_predictor(&self, beta: &[f64], offset: &[f64]) -> Vec<f64> {
        let mut eta = if offset.is_empty() {
            vec![0.0; self.rows()]
        } else {
            offset.to_vec()
        };
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (e, &x) in eta.iter_mut().zip(self.column(j)) {
                    *e += b * x;
                }
            }
        }
        eta
    }

    pub fn select_rows(&self, idx: &[usize]) -> DesignMatrix {
        let values = DMatrix::from_fn(idx.len(), self.cols(), |i, j| self.values[(idx[i], j)]);
        DesignMatrix {
            values,
            column_names: self.column_names.clone(),
            intercept: self.intercept,
        }
    }

    /// Weighted standard deviation of each column (weights normalized to sum one).
    pub fn weighted_column_sd(&self, weights: &[f64]) -> Vec<f64> {
        let total: f64 = weights.iter().sum();
        (0..self.cols())
            .map(|j| {
                let col = self.column(j);
                let mean = col.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total;
                let var = col
                    .iter()
                    .zip(weights)
                    .map(|(x, w)| w * (x - mean) * (x - mean))
                    .sum::<f64>()
                    / total;
                var.max(0.0).sqrt()
            })
            .collect()
    }
}

/// L1 penalty strength with per-coefficient factors.
///
/// A factor of zero leaves the coefficient unpenalized. Standardizing the
/// features for the penalty is equivalent to setting each factor to the
/// column's standard deviation, which keeps coefficients on the original scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub factors: Vec<f64>,
}

impl PenaltyConfig {
    /// Unit factors on every column except the design's intercept.
    pub fn lasso(lambda: f64, x: &DesignMatrix) -> Self {
        let mask: Vec<bool> = (0..x.cols()).map(|j| Some(j) != x.intercept()).collect();
        Self::from_mask(lambda, &mask)
    }

    pub fn from_mask(lambda: f64, mask: &[bool]) -> Self {
        Self {
            lambda,
            factors: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn unpenalized(cols: usize) -> Self {
        Self {
            lambda: 0.0,
            factors: vec![0.0; cols],
        }
    }

    /// Scales each penalized factor by the weighted column standard deviation.
    /// Constant columns keep a unit factor.
    pub fn standardized(mut self, x: &DesignMatrix, weights: &[f64]) -> Self {
        let sd = x.weighted_column_sd(weights);
        for (f, s) in self.factors.iter_mut().zip(sd) {
            if *f > 0.0 && s > 0.0 {
                *f *= s;
            }
        }
        self
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            factors: self.factors.clone(),
        }
    }

    pub fn penalty_mask(&self) -> Vec<bool> {
        self.factors.iter().map(|&f| f > 0.0).collect()
    }

    /// `lambda * sum_j f_j |b_j|`.
    pub fn value(&self, beta: &[f64]) -> f64 {
        self.lambda
            * self
                .factors
                .iter()
                .zip(beta)
                .map(|(f, b)| f * b.abs())
                .sum::<f64>()
    }

    fn validate(&self, cols: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(TracerError::InvalidArgument(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if self.factors.len() != cols {
            return Err(TracerError::Dimension(format!(
                "{} penalty factors for {} columns",
                self.factors.len(),
                cols
            )));
        }
        if self.factors.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
            return Err(TracerError::InvalidArgument(
                "penalty factors must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    /// Outer IRLS iterations.
    pub max_outer: usize,
    /// Convergence threshold on the largest absolute coefficient change.
    pub tol: f64,
    /// Cap on coordinate-descent sweeps per outer iteration.
    pub max_sweeps: usize,
    /// Ridge strength applied to penalized coefficients.
    pub l2: f64,
    /// Coordinate descent stops once no update lowers the quadratic model
    /// by more than this.
    pub cd_tol: f64,
}

impl SolverOptions {
    /// Settings for held-out fold fits, whose only use is a deviance score.
    pub fn cv_fold() -> Self {
        Self {
            tol: 1e-5,
            cd_tol: 1e-10,
            ..Self::default()
        }
    }
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_outer: 1000,
            tol: 1e-7,
            max_sweeps: 20_000,
            l2: 0.0,
            cd_tol: 1e-14,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    /// Penalized objective at the start and after every outer iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl GlmFit {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }
}

fn validate_problem(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    binary: bool,
) -> Result<()> {
    let n = x.rows();
    if y.len() != n || weights.len() != n || offset.len() != n {
        return Err(TracerError::Dimension(format!(
            "rows={n}, y={}, weights={}, offset={}",
            y.len(),
            weights.len(),
            offset.len()
        )));
    }
    check_finite("outcome", y)?;
    check_finite("weights", weights)?;
    check_finite("offset", offset)?;
    if let Some(i) = weights.iter().position(|w| *w < 0.0) {
        return Err(TracerError::InvalidArgument(format!(
            "negative weight at index {i}"
        )));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(TracerError::Degenerate("all weights are zero".into()));
    }
    if binary {
        if let Some(i) = y.iter().position(|v| *v != 0.0 && *v != 1.0) {
            return Err(TracerError::InvalidArgument(format!(
                "outcome at index {i} is not 0/1"
            )));
        }
    } else if let Some(i) = y.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(TracerError::InvalidArgument(format!(
            "target at index {i} is outside [0, 1]"
        )));
    }
    Ok(())
}

/// Weighted L1-penalized logistic regression with a frozen offset.
///
/// `y` must be binary. Use [`fit_logistic`] for fractional targets, warm
/// starts or non-default solver settings.
pub fn fit_weighted_logistic_lasso(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    penalty: &PenaltyConfig,
) -> Result<GlmFit> {
    validate_problem(x, y, weights, offset, true)?;
    fit_logistic(x, y, weights, offset, penalty, &SolverOptions::default(), None)
}

/// Logistic regression with targets in `[0, 1]`.
///
/// A fractional target `p` is the same as the expanded pair of records
/// (target 1, weight `w p`) and (target 0, weight `w (1-p)`): both give the
/// loss `w * (softplus(eta) - p * eta)`.
pub fn fit_logistic(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    penalty: &PenaltyConfig,
    opts: &SolverOptions,
    start: Option<&[f64]>,
) -> Result<GlmFit> {
    validate_problem(x, y, weights, offset, false)?;
    penalty.validate(x.cols())?;
    if let Some(s) = start {
        if s.len() != x.cols() {
            return Err(TracerError::Dimension("warm start length".into()));
        }
    }
    Ok(LogisticSolver::new(x, y, weights, offset, penalty, opts).run(start))
}

struct LogisticSolver<'a> {
    x: &'a DesignMatrix,
    y: &'a [f64],
    w: &'a [f64],
    offset: &'a [f64],
    lambda: f64,
    factors: &'a [f64],
    l2: Vec<f64>,
    opts: &'a SolverOptions,
    nf: f64,
}

impl<'a> LogisticSolver<'a> {
    fn new(
        x: &'a DesignMatrix,
        y: &'a [f64],
        w: &'a [f64],
        offset: &'a [f64],
        penalty: &'a PenaltyConfig,
        opts: &'a SolverOptions,
    ) -> Self {
        let l2 = penalty
            .factors
            .iter()
            .map(|&f| if f > 0.0 { opts.l2 } else { 0.0 })
            .collect();
        Self {
            x,
            y,
            w,
            offset,
            lambda: penalty.lambda,
            factors: &penalty.factors,
            l2,
            opts,
            nf: x.rows() as f64,
        }
    }

    fn objective(&self, eta: &[f64], beta: &[f64]) -> f64 {
        let data: f64 = self
            .y
            .iter()
            .zip(self.w)
            .zip(eta)
            .filter(|((_, w), _)| **w > 0.0)
            .map(|((y, w), e)| w * logistic_loss(*y, *e))
            .sum();
        let pen: f64 = beta
            .iter()
            .zip(self.factors)
            .zip(&self.l2)
            .map(|((b, f), l2)| self.lambda * f * b.abs() + 0.5 * l2 * b * b)
            .sum();
        data / self.nf + pen
    }

    fn initial_beta(&self) -> Vec<f64> {
        let mut beta = vec![0.0; self.x.cols()];
        if let Some(j) = self.x.intercept() {
            if self.factors[j] == 0.0 {
                let sw: f64 = self.w.iter().sum();
                let ybar = self.y.iter().zip(self.w).map(|(y, w)| y * w).sum::<f64>() / sw;
                let ybar = ybar.clamp(1e-6, 1.0 - 1e-6);
                let obar = self.offset.iter().zip(self.w).map(|(o, w)| o * w).sum::<f64>() / sw;
                beta[j] = logit(ybar) - obar;
            }
        }
        beta
    }

    fn run(&self, start: Option<&[f64]>) -> GlmFit {
        let n = self.x.rows();
        let p = self.x.cols();
        let mut beta = start.map_or_else(|| self.initial_beta(), <[f64]>::to_vec);
        let mut eta = self.x.linear_predictor(&beta, self.offset);
        let mut obj = self.objective(&eta, &beta);
        let mut trace = vec![obj];
        let mut converged = false;
        let mut iterations = 0;

        let mut v = vec![0.0; n];
        let mut r = vec![0.0; n];
        let mut xv2 = vec![0.0; p];
        let mut last_step = f64::INFINITY;

        for outer in 1..=self.opts.max_outer {
            iterations = outer;
            for i in 0..n {
                let mu = expit(eta[i]).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                let var = mu * (1.0 - mu);
                v[i] = self.w[i] * var / self.nf;
                r[i] = (self.y[i] - mu) / var;
            }
            for (j, s) in xv2.iter_mut().enumerate() {
                *s = self.x.column(j).iter().zip(&v).map(|(x, v)| v * x * x).sum();
            }

            let mut b = beta.clone();
            let mut res = r.clone();
            // early outer steps only need a rough inner solve
            let thresh = (1e-6 * last_step * last_step).clamp(self.opts.cd_tol, 1e-8f64.max(self.opts.cd_tol));
            self.coordinate_descent(&mut b, &mut res, &v, &xv2, thresh);

            let dir: Vec<f64> = b.iter().zip(&beta).map(|(b, a)| b - a).collect();
            let max_dir = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            if max_dir == 0.0 {
                converged = true;
                break;
            }
            let xd = self.x.linear_predictor(&dir, &[]);

            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let cand: Vec<f64> = beta.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                let eta_c: Vec<f64> = eta.iter().zip(&xd).map(|(e, d)| e + t * d).collect();
                let obj_c = self.objective(&eta_c, &cand);
                if obj_c <= obj {
                    accepted = Some((cand, eta_c, obj_c));
                    break;
                }
                t *= 0.5;
            }
            match accepted {
                Some((cand, eta_c, obj_c)) => {
                    beta = cand;
                    eta = eta_c;
                    obj = obj_c;
                    trace.push(obj);
                    last_step = t * max_dir;
                    if t * max_dir < self.opts.tol {
                        converged = true;
                        break;
                    }
                }
                None => {
                    // No representable descent along the IRLS direction.
                    converged = max_dir < 1e-5;
                    break;
                }
            }
        }
        if !converged {
            log::warn!(
                "logistic fit did not converge in {} outer iterations",
                self.opts.max_outer
            );
        }
        GlmFit {
            coefficients: beta,
            objective_trace: trace,
            converged,
            iterations,
        }
    }

    /// Minimizes the IRLS quadratic model in place. `res` holds the working
    /// residual `r - X (b - beta)` and is kept in sync with `b`.
    fn coordinate_descent(&self, b: &mut [f64], res: &mut [f64], v: &[f64], xv2: &[f64], thresh: f64) {
        let p = b.len();
        let mut sweeps = 0;
        let update = |j: usize, b: &mut [f64], res: &mut [f64]| -> f64 {
            let denom = xv2[j] + self.l2[j];
            if denom <= 0.0 {
                return 0.0;
            }
            let xj = self.x.column(j);
            let g: f64 = xj
                .iter()
                .zip(res.iter())
                .zip(v)
                .map(|((x, r), v)| v * x * r)
                .sum::<f64>()
                + xv2[j] * b[j];
            let bn = soft_threshold(g, self.lambda * self.factors[j]) / denom;
            let d = bn - b[j];
            if d != 0.0 {
                for (r, x) in res.iter_mut().zip(xj) {
                    *r -= x * d;
                }
                b[j] = bn;
            }
            denom * d * d
        };
        loop {
            let mut dmax = 0.0f64;
            for j in 0..p {
                dmax = dmax.max(update(j, b, res));
            }
            sweeps += 1;
            if dmax < thresh || sweeps >= self.opts.max_sweeps {
                break;
            }
            let active: Vec<usize> = (0..p)
                .filter(|&j| b[j] != 0.0 || self.factors[j] == 0.0)
                .collect();
            loop {
                let mut dmax = 0.0f64;
                for &j in &active {
                    dmax = dmax.max(update(j, b, res));
                }
                sweeps += 1;
                if dmax < thresh || sweeps >= self.opts.max_sweeps {
                    break;
                }
            }
        }
    }
}

/// Largest violation of the lasso KKT conditions at `beta`.
///
/// With `g_j = (1/N) sum_i w_i x_ij (mu_i - y_i)` the conditions are
/// `g_j = 0` for unpenalized coefficients, `|g_j| <= lambda f_j` for zero
/// penalized coefficients and `g_j + lambda f_j sign(b_j) = 0` otherwise.
pub fn kkt_violation(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    penalty: &PenaltyConfig,
    beta: &[f64],
) -> f64 {
    let grad = loss_gradient(x, y, weights, offset, beta);
    grad.iter()
        .zip(&penalty.factors)
        .zip(beta)
        .map(|((g, f), b)| {
            let t = penalty.lambda * f;
            if *f == 0.0 {
                g.abs()
            } else if *b == 0.0 {
                (g.abs() - t).max(0.0)
            } else {
                (g + t * b.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Gradient of `(1/N) sum_i w_i l(y_i, offset_i + x_i' b)`.
pub fn loss_gradient(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let nf = x.rows() as f64;
    let eta = x.linear_predictor(beta, offset);
    let resid: Vec<f64> = eta
        .iter()
        .zip(y)
        .zip(weights)
        .map(|((e, y), w)| w * (expit(*e) - y))
        .collect();
    (0..x.cols())
        .map(|j| x.column(j).iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() / nf)
        .collect()
}

/// Unpenalized (optionally ridge-stabilized) logistic regression by damped
/// Newton steps. Suited to few columns or fits that need exact stationarity,
/// such as fractional-response models. `l2` applies to every column except
/// the intercept.
pub fn fit_logistic_newton(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    l2: f64,
    max_iter: usize,
    start: Option<&[f64]>,
) -> Result<GlmFit> {
    validate_problem(x, y, weights, offset, false)?;
    let n = x.rows();
    let p = x.cols();
    let nf = n as f64;
    let mask: Vec<f64> = (0..p)
        .map(|j| if Some(j) == x.intercept() { 0.0 } else { l2 })
        .collect();
    let objective = |eta: &[f64], beta: &[f64]| -> f64 {
        let data: f64 = y
            .iter()
            .zip(weights)
            .zip(eta)
            .filter(|((_, w), _)| **w > 0.0)
            .map(|((y, w), e)| w * logistic_loss(*y, *e))
            .sum();
        data / nf + beta.iter().zip(&mask).map(|(b, l)| 0.5 * l * b * b).sum::<f64>()
    };

    let mut beta = match start {
        Some(s) => s.to_vec(),
        None => {
            let solver_pen = PenaltyConfig::unpenalized(p);
            let opts = SolverOptions::default();
            LogisticSolver::new(x, y, weights, offset, &solver_pen, &opts).initial_beta()
        }
    };
    let mut eta = x.linear_predictor(&beta, offset);
    let mut obj = objective(&eta, &beta);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut scaled = DMatrix::<f64>::zeros(n, p);

    for it in 1..=max_iter {
        iterations = it;
        let mut grad = DVector::<f64>::zeros(p);
        let mut sqrt_v = vec![0.0; n];
        let mut resid = vec![0.0; n];
        for i in 0..n {
            let mu = expit(eta[i]);
            let muc = mu.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            sqrt_v[i] = (weights[i] * muc * (1.0 - muc) / nf).sqrt();
            resid[i] = weights[i] * (mu - y[i]) / nf;
        }
        for j in 0..p {
            let col = x.column(j);
            grad[j] = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() + mask[j] * beta[j];
            for i in 0..n {
                scaled[(i, j)] = col[i] * sqrt_v[i];
            }
        }
        let mut hess = scaled.tr_mul(&scaled);
        for j in 0..p {
            hess[(j, j)] += mask[j];
        }
        let step = solve_spd_jittered(hess, &grad).0;
        let dir: Vec<f64> = step.iter().map(|s| -s).collect();
        let max_dir = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if !max_dir.is_finite() {
            break;
        }
        if max_dir == 0.0 {
            converged = true;
            break;
        }
        let xd = x.linear_predictor(&dir, &[]);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = beta.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            let eta_c: Vec<f64> = eta.iter().zip(&xd).map(|(e, d)| e + t * d).collect();
            let obj_c = objective(&eta_c, &cand);
            if obj_c <= obj {
                beta = cand;
                eta = eta_c;
                obj = obj_c;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            converged = max_dir < 1e-5;
            break;
        }
        trace.push(obj);
        if t * max_dir < 1e-9 {
            converged = true;
            break;
        }
    }
    Ok(GlmFit {
        coefficients: beta,
        objective_trace: trace,
        converged,
        iterations,
    })
}

/// Solves `a x = b` for symmetric PSD `a`, retrying with a diagonal jitter of
/// [`RIDGE_JITTER`] (scaled to the matrix) when the factorization fails or is
/// numerically rank deficient. Returns the solution and whether jitter was used.
pub(crate) fn solve_spd_jittered(a: DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let (x, jittered) = solve_spd_jittered_multi(a, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
    (x.column(0).into_owned(), jittered)
}

pub(crate) fn solve_spd_jittered_multi(a: DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let p = a.nrows();
    let scale = (0..p).map(|j| a[(j, j)].abs()).fold(0.0, f64::max).max(1.0);
    let well_conditioned = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        let l = c.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for j in 0..p {
            lo = lo.min(l[(j, j)].abs());
            hi = hi.max(l[(j, j)].abs());
        }
        hi > 0.0 && (lo / hi).powi(2) > 1e-13
    };
    if let Some(c) = a.clone().cholesky() {
        if well_conditioned(&c) {
            return (c.solve(b), false);
        }
    }
    let mut jittered = a;
    let mut eps = RIDGE_JITTER * scale;
    loop {
        let mut m = jittered.clone();
        for j in 0..p {
            m[(j, j)] += eps;
        }
        if let Some(c) = m.cholesky() {
            return (c.solve(b), true);
        }
        eps *= 10.0;
        if eps > scale * 1e6 {
            // Give up on factorization: fall back to a pseudo-inverse.
            for j in 0..p {
                jittered[(j, j)] += RIDGE_JITTER * scale;
            }
            let x = jittered
                .pseudo_inverse(1e-12)
                .map(|pinv| pinv * b)
                .unwrap_or_else(|_| DMatrix::zeros(p, b.ncols()));
            return (x, true);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvRule {
    /// Lambda with the smallest mean held-out deviance.
    Min,
    /// Largest lambda within one standard error of the minimum.
    OneStandardError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub folds: usize,
    pub n_lambda: usize,
    pub min_ratio: f64,
    pub seed: u64,
    pub rule: CvRule,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            n_lambda: 50,
            min_ratio: 1e-3,
            seed: 20_240_101,
            rule: CvRule::Min,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub lambdas: Vec<f64>,
    pub mean_deviance: Vec<f64>,
    pub se_deviance: Vec<f64>,
    pub best: usize,
    pub lambda: f64,
    /// Fit on all rows at the selected lambda.
    pub fit: GlmFit,
}

/// Smallest lambda at which every penalized coefficient is zero.
pub fn lambda_max(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    factors: &[f64],
) -> Result<f64> {
    let null = null_fit(x, y, weights, offset, factors)?;
    let grad = loss_gradient(x, y, weights, offset, &null.coefficients);
    Ok(grad
        .iter()
        .zip(factors)
        .filter(|(_, f)| **f > 0.0)
        .map(|(g, f)| g.abs() / f)
        .fold(0.0, f64::max))
}

/// Fit with every penalized coefficient held at zero.
fn null_fit(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    factors: &[f64],
) -> Result<GlmFit> {
    let pen = PenaltyConfig {
        lambda: 1e300,
        factors: factors.to_vec(),
    };
    fit_logistic(x, y, weights, offset, &pen, &SolverOptions::default(), None)
}

/// `n` log-spaced values from `max` down to `max * min_ratio`.
pub fn lambda_grid(max: f64, n: usize, min_ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![max];
    }
    let (hi, lo) = (max.ln(), (max * min_ratio).ln());
    (0..n)
        .map(|k| (hi + (lo - hi) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Warm-started fits along a decreasing lambda sequence.
pub fn fit_path(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    factors: &[f64],
    lambdas: &[f64],
) -> Result<Vec<GlmFit>> {
    path_inner(x, y, weights, offset, factors, lambdas, &SolverOptions::default(), false)
}

/// Fraction of null deviance explained at which a path stops.
pub const PATH_DEV_MAX: f64 = 0.999;
/// Relative gain in explained deviance below which a path stops.
pub const PATH_DEV_STEP: f64 = 1e-5;

/// As [`fit_path`], but stops once the fit explains `PATH_DEV_MAX` of the
/// null deviance or the explained fraction improves by less than
/// `PATH_DEV_STEP` (relative) from one lambda to the next. The returned path
/// can be shorter than `lambdas`.
pub fn fit_path_truncated(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    factors: &[f64],
    lambdas: &[f64],
) -> Result<Vec<GlmFit>> {
    path_inner(x, y, weights, offset, factors, lambdas, &SolverOptions::default(), true)
}

fn deviance(x: &DesignMatrix, y: &[f64], weights: &[f64], offset: &[f64], beta: &[f64]) -> f64 {
    let eta = x.linear_predictor(beta, offset);
    2.0 * eta
        .iter()
        .zip(y)
        .zip(weights)
        .map(|((e, y), w)| w * logistic_loss(*y, *e))
        .sum::<f64>()
}

fn path_inner(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    factors: &[f64],
    lambdas: &[f64],
    opts: &SolverOptions,
    truncate: bool,
) -> Result<Vec<GlmFit>> {
    let mut out: Vec<GlmFit> = Vec::with_capacity(lambdas.len());
    let mut warm: Option<Vec<f64>> = None;
    let mut null_dev = f64::NAN;
    let mut prev_ratio = 0.0;
    for (k, &lambda) in lambdas.iter().enumerate() {
        let pen = PenaltyConfig {
            lambda,
            factors: factors.to_vec(),
        };
        let fit = fit_logistic(x, y, weights, offset, &pen, opts, warm.as_deref())?;
        warm = Some(fit.coefficients.clone());
        let dev = if truncate {
            deviance(x, y, weights, offset, &fit.coefficients)
        } else {
            0.0
        };
        out.push(fit);
        if !truncate {
            continue;
        }
        if k == 0 {
            null_dev = dev;
            continue;
        }
        if !(null_dev > 0.0) {
            continue;
        }
        let ratio = 1.0 - dev / null_dev;
        if ratio > PATH_DEV_MAX || ratio - prev_ratio < PATH_DEV_STEP * ratio {
            break;
        }
        prev_ratio = ratio;
    }
    Ok(out)
}

/// Seed-deterministic fold labels in `0..k`.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

/// k-fold cross-validated lambda selection on weighted logistic deviance.
///
/// Folds are evaluated in parallel; fold membership depends only on the seed,
/// so the result does not depend on scheduling.
pub fn cv_logistic_lasso(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
    factors: &[f64],
    cv: &CvConfig,
) -> Result<CvResult> {
    validate_problem(x, y, weights, offset, false)?;
    PenaltyConfig {
        lambda: 0.0,
        factors: factors.to_vec(),
    }
    .validate(x.cols())?;
    if cv.folds < 2 || cv.n_lambda == 0 || !(cv.min_ratio > 0.0 && cv.min_ratio < 1.0) {
        return Err(TracerError::InvalidArgument(format!(
            "invalid CV settings: {cv:?}"
        )));
    }
    let n = x.rows();
    let lmax = lambda_max(x, y, weights, offset, factors)?;
    let lambdas = if lmax > 0.0 {
        lambda_grid(lmax, cv.n_lambda, cv.min_ratio)
    } else {
        vec![0.0]
    };
    // the full-data path fixes how far down the lambda sequence CV goes
    let full_path = fit_path_truncated(x, y, weights, offset, factors, &lambdas)?;
    let lambdas = lambdas[..full_path.len()].to_vec();
    let folds = fold_assignment(n, cv.folds, cv.seed);

    let per_fold: Vec<Option<Vec<f64>>> = (0..cv.folds)
        .into_par_iter()
        .map(|k| -> Result<Option<Vec<f64>>> {
            let train: Vec<usize> = (0..n).filter(|&i| folds[i] != k).collect();
            let test: Vec<usize> = (0..n).filter(|&i| folds[i] == k).collect();
            let w_test: f64 = test.iter().map(|&i| weights[i]).sum();
            let w_train: f64 = train.iter().map(|&i| weights[i]).sum();
            if w_test <= 0.0 || w_train <= 0.0 {
                return Ok(None);
            }
            let xt = x.select_rows(&train);
            let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let path = path_inner(
                &xt,
                &pick(y, &train),
                &pick(weights, &train),
                &pick(offset, &train),
                factors,
                &lambdas,
                &SolverOptions::cv_fold(),
                false,
            )?;
            let xv = x.select_rows(&test);
            let (yv, wv, ov) = (pick(y, &test), pick(weights, &test), pick(offset, &test));
            Ok(Some(
                path.iter()
                    .map(|fit| {
                        let eta = xv.linear_predictor(&fit.coefficients, &ov);
                        2.0 * eta
                            .iter()
                            .zip(&yv)
                            .zip(&wv)
                            .map(|((e, y), w)| w * logistic_loss(*y, *e))
                            .sum::<f64>()
                            / w_test
                    })
                    .collect(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let used: Vec<&Vec<f64>> = per_fold.iter().flatten().collect();
    if used.is_empty() {
        return Err(TracerError::Degenerate(
            "no fold has positive weight on both sides".into(),
        ));
    }
    let m = used.len() as f64;
    let mean_deviance: Vec<f64> = (0..lambdas.len())
        .map(|l| used.iter().map(|d| d[l]).sum::<f64>() / m)
        .collect();
    let se_deviance: Vec<f64> = (0..lambdas.len())
        .map(|l| {
            if used.len() < 2 {
                return 0.0;
            }
            let var = used
                .iter()
                .map(|d| (d[l] - mean_deviance[l]).powi(2))
                .sum::<f64>()
                / (m - 1.0);
            (var / m).sqrt()
        })
        .collect();
    let min_idx = mean_deviance
        .iter()
        .enumerate()
        .fold(0, |best, (i, d)| if *d < mean_deviance[best] { i } else { best });
    let best = match cv.rule {
        CvRule::Min => min_idx,
        CvRule::OneStandardError => {
            let bound = mean_deviance[min_idx] + se_deviance[min_idx];
            (0..=min_idx)
                .find(|&i| mean_deviance[i] <= bound)
                .unwrap_or(min_idx)
        }
    };
    let fit = full_path.into_iter().nth(best).expect("best index within the path");
    Ok(CvResult {
        lambda: lambdas[best],
        lambdas,
        mean_deviance,
        se_deviance,
        best,
        fit,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    /// `cols x targets`.
    pub coefficients: DMatrix<f64>,
    /// `rows x targets`.
    pub residuals: DMatrix<f64>,
    /// The Gram matrix needed ridge jitter.
    pub jittered: bool,
}

/// Weighted least squares, one solve shared by all target columns.
pub fn fit_weighted_linear(
    x: &DesignMatrix,
    targets: &DMatrix<f64>,
    weights: &[f64],
) -> Result<LinearFit> {
    let n = x.rows();
    if targets.nrows() != n || weights.len() != n {
        return Err(TracerError::Dimension(format!(
            "rows={n}, targets={}, weights={}",
            targets.nrows(),
            weights.len()
        )));
    }
    check_finite("targets", targets.as_slice())?;
    check_finite("weights", weights)?;
    if weights.iter().any(|w| *w < 0.0) {
        return Err(TracerError::InvalidArgument("negative weight".into()));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(TracerError::Degenerate("all weights are zero".into()));
    }
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let xs = DMatrix::from_fn(n, x.cols(), |i, j| x.values()[(i, j)] * sqrt_w[i]);
    let ys = DMatrix::from_fn(n, targets.ncols(), |i, k| targets[(i, k)] * sqrt_w[i]);
    let gram = xs.tr_mul(&xs);
    let rhs = xs.tr_mul(&ys);
    let (coefficients, jittered) = solve_spd_jittered_multi(gram, &rhs);
    let residuals = targets - x.values() * &coefficients;
    Ok(LinearFit {
        coefficients,
        residuals,
        jittered,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedCovariance {
    /// `sum_i w_i r_i r_i' / sum_i w_i`, before regularization.
    pub matrix: DMatrix<f64>,
    /// At most one record carried positive weight.
    pub degenerate: bool,
}

impl WeightedCovariance {
    /// The covariance plus `COV_EPS * I`, the form used for densities.
    pub fn regularized(&self) -> DMatrix<f64> {
        let d = self.matrix.nrows();
        &self.matrix + DMatrix::<f64>::identity(d, d) * COV_EPS
    }
}

pub fn weighted_covariance(residuals: &DMatrix<f64>, weights: &[f64]) -> Result<WeightedCovariance> {
    let (n, d) = residuals.shape();
    if weights.len() != n {
        return Err(TracerError::Dimension(format!(
            "{} weights for {n} residual rows",
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(TracerError::Degenerate("sum of weights is not positive".into()));
    }
    let effective = weights.iter().filter(|w| **w > 0.0).count();
    if effective <= 1 {
        return Ok(WeightedCovariance {
            matrix: DMatrix::zeros(d, d),
            degenerate: true,
        });
    }
    let scaled = DMatrix::from_fn(n, d, |i, k| residuals[(i, k)] * (weights[i] / total).sqrt());
    let mut matrix = scaled.tr_mul(&scaled);
    // exact symmetry
    for a in 0..d {
        for b in 0..a {
            let m = 0.5 * (matrix[(a, b)] + matrix[(b, a)]);
            matrix[(a, b)] = m;
            matrix[(b, a)] = m;
        }
    }
    Ok(WeightedCovariance {
        matrix,
        degenerate: false,
    })
}

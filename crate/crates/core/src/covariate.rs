//! Conditional Gaussian model of the shift-susceptible covariates `A` given
//! `W` within each latent state, and the optional logistic dimension reducer.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Result, TracerError};
use crate::glm::{
    expit, fit_logistic_newton, fit_weighted_linear, weighted_covariance, DesignMatrix,
};

/// Multivariate normal density with a cached Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDensity {
    /// Lower-triangular factor, row-major, `dim * dim`.
    lower: Vec<f64>,
    dim: usize,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let dim = sigma.nrows();
        if dim == 0 || sigma.ncols() != dim {
            return Err(TracerError::Dimension(format!(
                "covariance must be square and non-empty, got {:?}",
                sigma.shape()
            )));
        }
        check_finite("covariance", sigma.as_slice())?;
        let chol = match sigma.clone().cholesky() {
            Some(c) => c,
            None => {
                let sym = (sigma + sigma.transpose()) * 0.5;
                let min = sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
                return Err(TracerError::NotPositiveDefinite { min_eigenvalue: min });
            }
        };
        let l = chol.l();
        let log_det: f64 = 2.0 * (0..dim).map(|j| l[(j, j)].ln()).sum::<f64>();
        let mut lower = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                lower[i * dim + j] = l[(i, j)];
            }
        }
        Ok(Self {
            lower,
            dim,
            log_norm: -0.5 * (dim as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `log N(a; mean, sigma)` via forward substitution.
    pub fn log_density(&self, a: &[f64], mean: &[f64]) -> f64 {
        let d = self.dim;
        let mut z = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if d <= 16 {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut quad = 0.0;
        for i in 0..d {
            let row = &self.lower[i * d..i * d + i + 1];
            let mut s = a[i] - mean[i];
            for j in 0..i {
                s -= row[j] * z[j];
            }
            z[i] = s / row[i];
            quad += z[i] * z[i];
        }
        self.log_norm - 0.5 * quad
    }
}

/// Multivariate normal log-density.
pub fn gaussian_logdensity(a: &[f64], mean: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    if a.len() != sigma.nrows() || mean.len() != sigma.nrows() {
        return Err(TracerError::Dimension(format!(
            "point {} / mean {} / covariance {}",
            a.len(),
            mean.len(),
            sigma.nrows()
        )));
    }
    Ok(GaussianDensity::new(sigma)?.log_density(a, mean))
}

/// `A | W, S = s ~ N(beta' [1, W], sigma)` for one latent state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CondModelRepr", into = "CondModelRepr")]
pub struct GaussianCondModel {
    /// `(1 + dim_w) x dim_a`.
    beta: DMatrix<f64>,
    /// Regularized covariance (`+ COV_EPS * I`).
    sigma: DMatrix<f64>,
    density: GaussianDensity,
    /// The regression needed ridge jitter.
    pub jittered: bool,
    /// At most one record carried weight.
    pub degenerate_covariance: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CondModelRepr {
    beta: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    jittered: bool,
    degenerate_covariance: bool,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n == 0 || p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(TracerError::Schema(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

impl TryFrom<CondModelRepr> for GaussianCondModel {
    type Error = TracerError;

    fn try_from(r: CondModelRepr) -> Result<Self> {
        let beta = from_rows(&r.beta, "beta")?;
        let sigma = from_rows(&r.sigma, "sigma")?;
        let mut m = GaussianCondModel::new(beta, sigma)?;
        m.jittered = r.jittered;
        m.degenerate_covariance = r.degenerate_covariance;
        Ok(m)
    }
}

impl From<GaussianCondModel> for CondModelRepr {
    fn from(m: GaussianCondModel) -> Self {
        CondModelRepr {
            beta: to_rows(&m.beta),
            sigma: to_rows(&m.sigma),
            jittered: m.jittered,
            degenerate_covariance: m.degenerate_covariance,
        }
    }
}

impl GaussianCondModel {
    /// `sigma` is used as given (it must already be SPD).
    pub fn new(beta: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if beta.ncols() != sigma.nrows() {
            return Err(TracerError::Dimension(format!(
                "beta has {} outputs, sigma is {}x{}",
                beta.ncols(),
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        check_finite("beta", beta.as_slice())?;
        let density = GaussianDensity::new(&sigma)?;
        Ok(Self {
            beta,
            sigma,
            density,
            jittered: false,
            degenerate_covariance: false,
        })
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn dim_a(&self) -> usize {
        self.beta.ncols()
    }

    /// Number of `W` covariates (excluding the intercept).
    pub fn dim_w(&self) -> usize {
        self.beta.nrows() - 1
    }

    /// `beta' [1, w]`.
    pub fn mean(&self, w: &[f64]) -> Vec<f64> {
        (0..self.dim_a())
            .map(|k| {
                self.beta[(0, k)]
                    + w.iter()
                        .enumerate()
                        .map(|(j, x)| self.beta[(j + 1, k)] * x)
                        .sum::<f64>()
            })
            .collect()
    }

    /// `log f(a | w)`.
    pub fn log_density(&self, a: &[f64], w: &[f64]) -> f64 {
        self.density.log_density(a, &self.mean(w))
    }

    pub(crate) fn log_density_with_mean(&self, a: &[f64], mean: &[f64]) -> f64 {
        self.density.log_density(a, mean)
    }
}

/// Weighted linear regression of `A` on `[1, W]` and the weighted residual
/// covariance.
pub fn fit_state_model(
    w_design: &DesignMatrix,
    a: &DMatrix<f64>,
    weights: &[f64],
) -> Result<GaussianCondModel> {
    let lin = fit_weighted_linear(w_design, a, weights)?;
    let cov = weighted_covariance(&lin.residuals, weights)?;
    let mut model = GaussianCondModel::new(lin.coefficients, cov.regularized())?;
    model.jittered = lin.jittered;
    model.degenerate_covariance = cov.degenerate;
    Ok(model)
}

/// Logistic regression of the transition posterior on `A`. The reduced
/// covariate is `A' = P(S = 1 | A)`; densities use its logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimReducer {
    /// Intercept followed by one coefficient per `A` column.
    pub coefficients: Vec<f64>,
    pub active: bool,
    /// The unpenalized fit separated and was replaced by a ridge fit.
    pub ridge_fallback: bool,
}

/// Ridge strength used when the unpenalized reducer fit separates.
pub const REDUCER_RIDGE: f64 = 1e-4;

impl DimReducer {
    /// Linear score `c0 + c' a`, i.e. `logit(A')`.
    pub fn score(&self, a: &[f64]) -> f64 {
        self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(a)
                .map(|(c, x)| c * x)
                .sum::<f64>()
    }

    /// `A'` in `(0, 1)`.
    pub fn transform(&self, a: &[f64]) -> f64 {
        expit(self.score(a))
    }

    /// Scores for every row of `a` as an `n x 1` matrix.
    pub fn score_matrix(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut out = DMatrix::from_element(n, 1, self.coefficients[0]);
        for (j, c) in self.coefficients[1..].iter().enumerate() {
            if *c != 0.0 {
                for i in 0..n {
                    out[(i, 0)] += c * a[(i, j)];
                }
            }
        }
        out
    }
}

pub fn fit_dim_reducer(a: &DMatrix<f64>, s_hat: &[f64]) -> Result<DimReducer> {
    fit_dim_reducer_warm(a, s_hat, None, REDUCER_NEWTON_STEPS)
}

/// Newton iterations of a cold reducer fit.
pub const REDUCER_NEWTON_STEPS: usize = 50;

/// As [`fit_dim_reducer`], warm-started from a previous reducer and limited
/// to `max_steps` Newton iterations. Warm fits that stop early are accepted
/// as they are; only a cold fit that fails to converge counts as separated.
pub fn fit_dim_reducer_warm(
    a: &DMatrix<f64>,
    s_hat: &[f64],
    warm: Option<&DimReducer>,
    max_steps: usize,
) -> Result<DimReducer> {
    if s_hat.len() != a.nrows() {
        return Err(TracerError::Dimension(format!(
            "{} posteriors for {} rows",
            s_hat.len(),
            a.nrows()
        )));
    }
    if let Some(i) = s_hat.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(TracerError::InvalidArgument(format!(
            "posterior at index {i} outside [0, 1]"
        )));
    }
    let names: Vec<String> = (0..a.ncols()).map(|j| format!("a{j}")).collect();
    let x = DesignMatrix::with_intercept(a, &names)?;
    let n = a.nrows();
    let ones = vec![1.0; n];
    let zeros = vec![0.0; n];
    let start = warm
        .filter(|r| !r.ridge_fallback && r.coefficients.len() == x.cols())
        .map(|r| r.coefficients.as_slice());
    let fit = fit_logistic_newton(&x, s_hat, &ones, &zeros, 0.0, max_steps.max(1), start)?;
    let separated = (!fit.converged && start.is_none()) || fit.coefficients.iter().any(|c| c.abs() > 1e3);
    if !separated {
        return Ok(DimReducer {
            coefficients: fit.coefficients,
            active: true,
            ridge_fallback: false,
        });
    }
    let ridge = fit_logistic_newton(&x, s_hat, &ones, &zeros, REDUCER_RIDGE, 200, None)?;
    Ok(DimReducer {
        coefficients: ridge.coefficients,
        active: true,
        ridge_fallback: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::glm::COV_EPS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_constants() {
        let one = DMatrix::identity(1, 1);
        assert_abs_diff_eq!(
            gaussian_logdensity(&[0.0], &[0.0], &one).unwrap(),
            -0.5 * (2.0 * PI).ln(),
            epsilon = 1e-14
        );
        let two = DMatrix::identity(2, 2);
        assert_abs_diff_eq!(
            gaussian_logdensity(&[3.0, -1.0], &[3.0, -1.0], &two).unwrap(),
            -(2.0 * PI).ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn not_positive_definite_names_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match gaussian_logdensity(&[0.0, 0.0], &[0.0, 0.0], &m).unwrap_err() {
            TracerError::NotPositiveDefinite { min_eigenvalue } => {
                assert_abs_diff_eq!(min_eigenvalue, -1.0, epsilon = 1e-12)
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn density_integrates_to_one_in_1d() {
        let sd = 1.7;
        let sigma = DMatrix::from_element(1, 1, sd * sd);
        let dens = GaussianDensity::new(&sigma).unwrap();
        let (lo, hi, m) = (0.4 - 8.0 * sd, 0.4 + 8.0 * sd, 20_000);
        let h = (hi - lo) / m as f64;
        // composite Simpson
        let mut s = 0.0;
        for k in 0..=m {
            let x = lo + k as f64 * h;
            let c = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            s += c * dens.log_density(&[x], &[0.4]).exp();
        }
        assert_abs_diff_eq!(s * h / 3.0, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn exact_linear_covariates_give_eps_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = DMatrix::from_fn(30, 2, |_, _| rng.gen_range(-1.0..1.0));
        let a = DMatrix::from_fn(30, 2, |i, k| 0.5 + (k as f64 + 1.0) * w[(i, 0)] - w[(i, 1)]);
        let wd = DesignMatrix::with_intercept(&w, &["w1".into(), "w2".into()]).unwrap();
        let m = fit_state_model(&wd, &a, &[1.0; 30]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { COV_EPS } else { 0.0 };
                assert_abs_diff_eq!(m.sigma()[(i, j)], expect, epsilon = 1e-14);
            }
        }
        assert_abs_diff_eq!(m.beta()[(1, 1)], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn weights_restrict_to_subgroup() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = DMatrix::from_fn(40, 1, |_, _| rng.gen_range(-1.0..1.0));
        let a = DMatrix::from_fn(40, 1, |i, _| if i < 20 { w[(i, 0)] } else { -3.0 * w[(i, 0)] + 1.0 } + rng.gen_range(-0.2..0.2));
        let wd = DesignMatrix::with_intercept(&w, &["w".into()]).unwrap();
        let weights: Vec<f64> = (0..40).map(|i| if i < 20 { 1.0 } else { 0.0 }).collect();
        let full = fit_state_model(&wd, &a, &weights).unwrap();
        let idx: Vec<usize> = (0..20).collect();
        let sub_a = DMatrix::from_fn(20, 1, |i, _| a[(i, 0)]);
        let sub = fit_state_model(&wd.select_rows(&idx), &sub_a, &[1.0; 20]).unwrap();
        assert_abs_diff_eq!(full.beta(), sub.beta(), epsilon = 1e-10);
        assert_abs_diff_eq!(full.sigma(), sub.sigma(), epsilon = 1e-10);
    }

    #[test]
    fn reducer_constant_column_and_flat_posteriors() {
        let a = DMatrix::from_element(25, 1, 2.0);
        let s: Vec<f64> = (0..25).map(|i| (i % 5) as f64 / 4.0).collect();
        let mean = s.iter().sum::<f64>() / 25.0;
        let r = fit_dim_reducer(&a, &s).unwrap();
        assert_abs_diff_eq!(r.transform(&[2.0]), mean, epsilon = 1e-8);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(60, 3, |_, _| rng.gen_range(-1.0..1.0));
        let r = fit_dim_reducer(&a, &[0.3; 60]).unwrap();
        for i in 0..60 {
            let row: Vec<f64> = a.row(i).iter().copied().collect();
            assert_abs_diff_eq!(r.transform(&row), 0.3, epsilon = 1e-8);
        }
    }

    #[test]
    fn reducer_separated_uses_ridge_fallback() {
        let a = DMatrix::from_fn(40, 1, |i, _| i as f64 / 10.0 - 2.0);
        let s: Vec<f64> = (0..40).map(|i| if i >= 20 { 1.0 } else { 0.0 }).collect();
        let r = fit_dim_reducer(&a, &s).unwrap();
        assert!(r.ridge_fallback);
        // records away from the boundary land near 0 and 1
        for i in 0..40 {
            let v = r.transform(&[a[(i, 0)]]);
            if i >= 22 {
                assert!(v >= 0.95, "{i}: {v}");
            } else if i < 18 {
                assert!(v <= 0.05, "{i}: {v}");
            }
        }
    }
}

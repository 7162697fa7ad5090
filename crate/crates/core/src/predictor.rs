//! Prediction for new records and the three-model validation ensemble.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::em::{linear, TracerParams};
use crate::error::{check_finite, Result, TracerError};
use crate::glm::{expit, solve_spd_jittered, RIDGE_JITTER};

/// `P(S = 1 | W, A)` from the prior and the covariate densities only.
/// Exactly 0 when the time gate applies.
pub fn predict_transition_prob(w: &[f64], a: &[f64], time: i64, params: &TracerParams) -> Result<f64> {
    check_dims(w, a, params)?;
    if params.is_gated(time) {
        return Ok(0.0);
    }
    let (p1, p0) = params.log_prior(w, time);
    let (f1, f0) = params.log_covariate(w, a);
    let (l1, l0) = (p1 + f1, p0 + f0);
    if !l1.is_finite() || !l0.is_finite() {
        return Err(TracerError::NonFinite {
            what: "covariate density",
            indices: vec![0],
        });
    }
    // posterior odds are prior odds times the density ratio
    Ok(expit(l1 - l0))
}

fn check_dims(w: &[f64], a: &[f64], params: &TracerParams) -> Result<()> {
    if w.len() != params.dim_w() || a.len() != params.dim_a() {
        return Err(TracerError::Dimension(format!(
            "record has dim_w={}, dim_a={}; model expects {} and {}",
            w.len(),
            a.len(),
            params.dim_w(),
            params.dim_a()
        )));
    }
    Ok(())
}

/// The mixture `q expit(x'eta1) + (1 - q) expit(x'eta0)`. Equal linear
/// predictors return `expit(lin0)` exactly.
pub fn mix(q: f64, lin0: f64, lin1: f64) -> f64 {
    if lin0 == lin1 {
        return expit(lin0);
    }
    q * expit(lin1) + (1.0 - q) * expit(lin0)
}

/// Outcome-model inputs `x = [A, W]` (no intercept) for one record.
pub fn outcome_features(a: &[f64], w: &[f64]) -> Vec<f64> {
    a.iter().chain(w).copied().collect()
}

/// TRACER prediction for one record; `x` is `[A, W]` without the intercept.
pub fn predict_tracer(x: &[f64], w: &[f64], a: &[f64], time: i64, params: &TracerParams) -> Result<f64> {
    if x.len() + 1 != params.eta0.len() {
        return Err(TracerError::Dimension(format!(
            "x has {} features, model expects {}",
            x.len(),
            params.eta0.len() - 1
        )));
    }
    let q = predict_transition_prob(w, a, time, params)?;
    Ok(mix(q, linear(&params.eta0, x), linear(&params.eta1(), x)))
}

/// Per-record predictions over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TracerPredictions {
    pub probability: Vec<f64>,
    pub transition: Vec<f64>,
}

pub fn predict_dataset(params: &TracerParams, data: &Dataset) -> Result<TracerPredictions> {
    params.check_layout(data)?;
    let eta1 = params.eta1();
    let mut probability = Vec::with_capacity(data.len());
    let mut transition = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (w, a) = (data.w_row(i), data.a_row(i));
        let x = outcome_features(&a, &w);
        let q = predict_transition_prob(&w, &a, data.time()[i], params)
            .map_err(|e| match e {
                TracerError::NonFinite { what, .. } => TracerError::NonFinite { what, indices: vec![i] },
                e => e,
            })?;
        transition.push(q);
        probability.push(mix(q, linear(&params.eta0, &x), linear(&eta1, &x)));
    }
    Ok(TracerPredictions {
        probability,
        transition,
    })
}

/// Plain logistic predictions `expit(X beta)` for a dataset, evaluated in
/// the same order as [`predict_tracer`] so equal coefficients agree exactly.
pub fn predict_logistic(coefficients: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    let p = 1 + data.dim_a() + data.dim_w();
    if coefficients.len() != p {
        return Err(TracerError::Dimension(format!(
            "{} coefficients for {p} design columns",
            coefficients.len()
        )));
    }
    Ok((0..data.len())
        .map(|i| expit(linear(coefficients, &outcome_features(&data.a_row(i), &data.w_row(i)))))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleDiagnostics {
    /// 2-norm condition number of the unjittered normal-equation matrix,
    /// `f64::MAX` when it is singular.
    pub condition_number: f64,
    pub n_val: usize,
    /// The normal equations were singular enough to need extra jitter.
    pub collinear: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleWeights {
    pub w_tracer: f64,
    pub w_hist: f64,
    pub w_current: f64,
    pub intercept: f64,
    pub fit_diagnostics: EnsembleDiagnostics,
}

pub const MIN_VALIDATION: usize = 10;

/// Normal-equation condition numbers above this are reported as collinear.
pub const COLLINEAR_CONDITION: f64 = 1e10;

/// Least squares of the validation outcomes on the three model predictions
/// plus an intercept, with ridge jitter on the three weights.
pub fn fit_ensemble_weights(
    val: &Dataset,
    preds_tracer: &[f64],
    preds_hist: &[f64],
    preds_current: &[f64],
) -> Result<EnsembleWeights> {
    let y = val.y_f64();
    if !val.has_both_classes() {
        return Err(TracerError::SingleClass("validation outcomes".into()));
    }
    fit_ensemble_raw(&y, preds_tracer, preds_hist, preds_current)
}

/// As [`fit_ensemble_weights`] over a bare outcome vector.
pub fn fit_ensemble_raw(y: &[f64], t: &[f64], h: &[f64], c: &[f64]) -> Result<EnsembleWeights> {
    let n = y.len();
    if n < MIN_VALIDATION {
        return Err(TracerError::InvalidArgument(format!(
            "ensemble needs at least {MIN_VALIDATION} validation records, got {n}"
        )));
    }
    if t.len() != n || h.len() != n || c.len() != n {
        return Err(TracerError::Dimension("prediction vectors differ in length from outcomes".into()));
    }
    for (v, what) in [(t, "tracer predictions"), (h, "historical predictions"), (c, "current predictions")] {
        check_finite(what, v)?;
    }
    let x = DMatrix::from_fn(n, 4, |i, j| match j {
        0 => 1.0,
        1 => t[i],
        2 => h[i],
        _ => c[i],
    });
    let mut xtx = x.tr_mul(&x);
    let sv = xtx.clone().singular_values();
    let condition_number = match sv.max() / sv.min() {
        c if c.is_finite() => c,
        _ => f64::MAX,
    };
    for j in 1..4 {
        xtx[(j, j)] += RIDGE_JITTER;
    }
    let xty = x.tr_mul(&DVector::from_column_slice(y));
    let (b, jittered) = solve_spd_jittered(xtx, &xty);
    Ok(EnsembleWeights {
        w_tracer: b[1],
        w_hist: b[2],
        w_current: b[3],
        intercept: b[0],
        fit_diagnostics: EnsembleDiagnostics {
            condition_number,
            n_val: n,
            collinear: jittered || !(condition_number < COLLINEAR_CONDITION),
        },
    })
}

/// Ensemble value before clipping.
pub fn ensemble_linear(weights: &EnsembleWeights, preds: [f64; 3]) -> f64 {
    weights.intercept + weights.w_tracer * preds[0] + weights.w_hist * preds[1] + weights.w_current * preds[2]
}

/// Ensemble prediction clipped to `[0, 1]`; the flag reports whether clipping happened.
pub fn predict_ensemble(weights: &EnsembleWeights, preds: [f64; 3]) -> (f64, bool) {
    let v = ensemble_linear(weights, preds);
    let c = v.clamp(0.0, 1.0);
    (c, c != v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariate::GaussianCondModel;
    use approx::assert_abs_diff_eq;

    fn params(mean1: f64) -> TracerParams {
        TracerParams {
            gamma: vec![0.0, 0.0],
            cond0: GaussianCondModel::new(DMatrix::zeros(2, 1), DMatrix::identity(1, 1)).unwrap(),
            cond1: GaussianCondModel::new(DMatrix::from_row_slice(2, 1, &[mean1, 0.0]), DMatrix::identity(1, 1)).unwrap(),
            eta0: vec![0.0, 0.0, 0.0],
            delta: vec![1.0, 0.0, 0.0],
            reducer: None,
            transition_time: 5,
            w_names: vec!["w_0".into()],
            a_names: vec!["a_0".into()],
        }
    }

    #[test]
    fn equal_densities_return_prior() {
        let mut p = params(0.0);
        p.gamma = vec![-0.7, 0.4];
        let q = predict_transition_prob(&[1.5], &[0.3], 9, &p).unwrap();
        assert_abs_diff_eq!(q, expit(-0.7 + 0.6), epsilon = 1e-15);
        assert_eq!(predict_transition_prob(&[1.5], &[0.3], 4, &p).unwrap(), 0.0);
    }

    #[test]
    fn one_dimensional_transition_posterior() {
        // the record sits at the state-1 mean, so q = phi(0) / (phi(0) + phi(1))
        let q = predict_transition_prob(&[0.0], &[1.0], 9, &params(1.0)).unwrap();
        assert_abs_diff_eq!(q, 1.0 / (1.0 + (-0.5f64).exp()), epsilon = 1e-14);
        assert_abs_diff_eq!(q, 0.622_459_331_201_854_6, epsilon = 1e-12);
    }

    #[test]
    fn mixture_arithmetic() {
        assert_abs_diff_eq!(mix(0.5, 0.0, 1.0), 0.615_529_3, epsilon = 1e-6);
        assert_eq!(mix(1.0, -3.0, 0.4), expit(0.4));
        let p = params(0.0);
        let x = [0.2, -0.1];
        let v = predict_tracer(&x, &[-0.1], &[0.2], 9, &p).unwrap();
        assert_abs_diff_eq!(v, 0.5 * 0.5 + 0.5 * expit(1.0), epsilon = 1e-15);
        assert!(predict_tracer(&[0.0], &[0.0], &[0.0], 9, &p).is_err());
    }

    #[test]
    fn ensemble_arithmetic_and_clipping() {
        let mk = |t, h, c, b| EnsembleWeights {
            w_tracer: t,
            w_hist: h,
            w_current: c,
            intercept: b,
            fit_diagnostics: EnsembleDiagnostics {
                condition_number: 1.0,
                n_val: 10,
                collinear: false,
            },
        };
        assert_eq!(predict_ensemble(&mk(1.0, 0.0, 0.0, 0.0), [0.37, 0.9, 0.1]), (0.37, false));
        let third = 1.0 / 3.0;
        assert_abs_diff_eq!(predict_ensemble(&mk(third, third, third, 0.0), [0.3; 3]).0, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(predict_ensemble(&mk(0.5, 0.25, 0.25, 0.1), [0.8, 0.4, 0.2]).0, 0.65, epsilon = 1e-15);
        assert_eq!(predict_ensemble(&mk(2.0, 0.0, 0.0, 0.0), [0.8, 0.0, 0.0]), (1.0, true));
    }

    #[test]
    fn ensemble_recovers_exact_regressor() {
        let y: Vec<f64> = (0..40).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let h: Vec<f64> = (0..40).map(|i| ((i as f64) * 1.3).sin().abs()).collect();
        let c: Vec<f64> = (0..40).map(|i| ((i as f64) * 0.7).cos().abs()).collect();
        let w = fit_ensemble_raw(&y, &y, &h, &c).unwrap();
        assert_abs_diff_eq!(w.w_tracer, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(w.w_hist, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(w.w_current, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(w.intercept, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn identical_predictions_split_weight() {
        let y: Vec<f64> = (0..30).map(|i| (i % 2) as f64).collect();
        let p: Vec<f64> = (0..30).map(|i| 0.2 + 0.5 * ((i % 2) as f64) + 0.01 * (i as f64 / 30.0)).collect();
        let w = fit_ensemble_raw(&y, &p, &p, &p).unwrap();
        assert_abs_diff_eq!(w.w_tracer, w.w_hist, epsilon = 1e-6);
        assert_abs_diff_eq!(w.w_hist, w.w_current, epsilon = 1e-6);
        assert!(w.fit_diagnostics.collinear);
        assert!(fit_ensemble_raw(&y[..9], &p[..9], &p[..9], &p[..9]).is_err());
    }
}

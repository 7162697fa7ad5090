//! Discrimination and calibration metrics, cohort balance, and bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Result, TracerError};

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(TracerError::Dimension(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(TracerError::InvalidArgument("empty input".into()));
    }
    Ok(())
}

fn binary(labels: &[f64]) -> Result<()> {
    match labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        Some(i) => Err(TracerError::InvalidArgument(format!("label {i} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Area under the ROC curve: the Mann-Whitney probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    same_len(scores.len(), labels.len())?;
    check_finite("scores", scores)?;
    binary(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // walk tied groups in increasing score order; counts stay exact integers
    let (mut neg_below, mut concordant, mut tied) = (0u64, 0u64, 0u64);
    let (mut n_pos, mut n_neg) = (0u64, 0u64);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let (mut pos, mut neg) = (0u64, 0u64);
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] == 1.0 {
                pos += 1;
            } else {
                neg += 1;
            }
            k += 1;
        }
        concordant += pos * neg_below;
        tied += pos * neg;
        neg_below += neg;
        n_pos += pos;
        n_neg += neg;
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(TracerError::SingleClass("AUC needs both outcome classes".into()));
    }
    Ok((2 * concordant + tied) as f64 / (2 * n_pos * n_neg) as f64)
}

/// Mean squared difference.
pub fn mse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    same_len(preds.len(), targets.len())?;
    check_finite("predictions", preds)?;
    check_finite("targets", targets)?;
    Ok(sse(preds, targets) / preds.len() as f64)
}

fn sse(preds: &[f64], targets: &[f64]) -> f64 {
    preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum()
}

/// Mean squared probability error against 0/1 labels.
pub fn brier(preds: &[f64], labels: &[f64]) -> Result<f64> {
    same_len(preds.len(), labels.len())?;
    binary(labels)?;
    if let Some(i) = preds.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(TracerError::InvalidArgument(format!(
            "prediction {i} = {} is outside [0, 1]",
            preds[i]
        )));
    }
    mse(preds, labels)
}

/// `1 - SSE / SST`, with SST taken about the target mean.
pub fn r2(preds: &[f64], targets: &[f64]) -> Result<f64> {
    same_len(preds.len(), targets.len())?;
    check_finite("predictions", preds)?;
    check_finite("targets", targets)?;
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let sst: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    if sst <= 0.0 {
        return Err(TracerError::Degenerate("R² needs targets with nonzero variance".into()));
    }
    Ok(1.0 - sse(preds, targets) / sst)
}

/// Per-variable cohort summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariableSummary {
    Continuous { mean: f64, sd: f64, n: usize },
    Binary { proportion: f64, n: usize },
}

impl VariableSummary {
    pub fn continuous(mean: f64, sd: f64, n: usize) -> Result<Self> {
        if !mean.is_finite() || !(sd >= 0.0) || !sd.is_finite() {
            return Err(TracerError::InvalidArgument("summary needs finite mean and sd >= 0".into()));
        }
        Ok(Self::Continuous { mean, sd, n })
    }

    pub fn binary(proportion: f64, n: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&proportion) {
            return Err(TracerError::InvalidArgument("proportion must lie in [0, 1]".into()));
        }
        Ok(Self::Binary { proportion, n })
    }

    /// Sample mean and (n - 1) standard deviation.
    pub fn of_continuous(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(TracerError::InvalidArgument("need at least two values".into()));
        }
        check_finite("values", values)?;
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        Self::continuous(mean, var.sqrt(), values.len())
    }

    pub fn of_binary(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(TracerError::InvalidArgument("need at least one value".into()));
        }
        binary(values)?;
        Self::binary(values.iter().sum::<f64>() / values.len() as f64, values.len())
    }
}

/// Standardized mean difference with the pooled (average-variance) denominator.
pub fn smd(a: &VariableSummary, b: &VariableSummary) -> Result<f64> {
    let (diff, pooled_var) = match (*a, *b) {
        (VariableSummary::Continuous { mean: ma, sd: sa, .. }, VariableSummary::Continuous { mean: mb, sd: sb, .. }) => {
            (ma - mb, (sa * sa + sb * sb) / 2.0)
        }
        (VariableSummary::Binary { proportion: pa, .. }, VariableSummary::Binary { proportion: pb, .. }) => {
            (pa - pb, (pa * (1.0 - pa) + pb * (1.0 - pb)) / 2.0)
        }
        _ => {
            return Err(TracerError::InvalidArgument(
                "cannot compare a continuous summary with a binary one".into(),
            ))
        }
    };
    if !(pooled_var > 0.0) {
        return Err(TracerError::Degenerate("pooled standard deviation is zero".into()));
    }
    Ok(diff.abs() / pooled_var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    Brier,
    Mse,
    R2,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Auc, Metric::Brier, Metric::Mse, Metric::R2];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Brier => "brier",
            Metric::Mse => "mse",
            Metric::R2 => "r2",
        }
    }

    pub fn evaluate(self, preds: &[f64], labels: &[f64]) -> Result<f64> {
        match self {
            Metric::Auc => auc(preds, labels),
            Metric::Brier => brier(preds, labels),
            Metric::Mse => mse(preds, labels),
            Metric::R2 => r2(preds, labels),
        }
    }

    /// Whether a resample can be scored at all.
    fn defined_on(self, labels: &[f64]) -> bool {
        match self {
            Metric::Auc | Metric::R2 => {
                let first = labels[0];
                labels.iter().any(|&y| y != first)
            }
            Metric::Brier | Metric::Mse => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub n_boot: usize,
    pub seed: u64,
}

pub const MIN_BOOT: usize = 100;

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95% percentile bootstrap interval. Resample `b` draws from its own
/// ChaCha stream, so results do not depend on scheduling. For metrics that
/// need both classes, deficient resamples are redrawn, up to `10 * n_boot`
/// draws in total.
pub fn bootstrap_ci(metric: Metric, preds: &[f64], labels: &[f64], n_boot: usize, seed: u64) -> Result<ConfidenceInterval> {
    if n_boot < MIN_BOOT {
        return Err(TracerError::InvalidArgument(format!("n_boot must be at least {MIN_BOOT}")));
    }
    metric.evaluate(preds, labels)?;
    let n = preds.len();
    let cap = 10 * n_boot;
    let draws: Vec<(f64, usize)> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut p = vec![0.0; n];
            let mut y = vec![0.0; n];
            let mut attempts = 0;
            loop {
                attempts += 1;
                for k in 0..n {
                    let i = rng.gen_range(0..n);
                    p[k] = preds[i];
                    y[k] = labels[i];
                }
                if metric.defined_on(&y) {
                    return Ok((metric.evaluate(&p, &y)?, attempts));
                }
                if attempts > cap {
                    return Ok((f64::NAN, attempts));
                }
            }
        })
        .collect::<Result<_>>()?;
    let total: usize = draws.iter().map(|d| d.1).sum();
    if total > cap {
        return Err(TracerError::Degenerate(format!(
            "bootstrap needed more than {cap} resamples to find both classes"
        )));
    }
    let mut stats: Vec<f64> = draws.into_iter().map(|d| d.0).collect();
    stats.sort_by(f64::total_cmp);
    Ok(ConfidenceInterval {
        lower: quantile(&stats, 0.025),
        upper: quantile(&stats, 0.975),
        n_boot,
        seed,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricCis {
    pub auc: Option<ConfidenceInterval>,
    pub brier: Option<ConfidenceInterval>,
    pub mse: Option<ConfidenceInterval>,
    pub r2: Option<ConfidenceInterval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub n: usize,
    pub auc: f64,
    pub brier: f64,
    pub mse: f64,
    pub r2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<MetricCis>,
}

/// Bootstrap settings for a report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub seed: u64,
}

impl MetricsReport {
    /// All metrics of probability predictions against 0/1 labels.
    pub fn compute(preds: &[f64], labels: &[f64], bootstrap: Option<BootstrapConfig>) -> Result<Self> {
        let auc = auc(preds, labels)?;
        let brier = brier(preds, labels)?;
        let ci = match bootstrap {
            None => None,
            Some(b) => {
                let one = |m| bootstrap_ci(m, preds, labels, b.n_boot, b.seed).map(Some);
                Some(MetricCis {
                    auc: one(Metric::Auc)?,
                    brier: one(Metric::Brier)?,
                    mse: one(Metric::Mse)?,
                    r2: one(Metric::R2)?,
                })
            }
        };
        Ok(Self {
            n: preds.len(),
            auc,
            brier,
            mse: mse(preds, labels)?,
            r2: r2(preds, labels)?,
            ci,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn auc_edge_cases() {
        let y = [0.0, 1.0, 1.0, 0.0, 1.0];
        assert_eq!(auc(&y, &y).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &y).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(TracerError::SingleClass(_))));
        assert!(auc(&[f64::NAN, 0.2], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn brier_and_r2_values() {
        assert_eq!(brier(&[0.5; 4], &[0.0, 1.0, 1.0, 1.0]).unwrap(), 0.25);
        assert_eq!(brier(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(brier(&[0.8, 0.2], &[1.0, 0.0]).unwrap(), 0.04, epsilon = 1e-15);
        assert!(brier(&[1.2, 0.2], &[1.0, 0.0]).is_err());
        let t = [1.0, 2.0, 4.0];
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        assert_eq!(r2(&[7.0 / 3.0; 3], &t).unwrap(), 0.0);
        assert!(r2(&[1.0, 2.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn smd_table_values() {
        let a = VariableSummary::continuous(43.11, 23.03, 100).unwrap();
        let b = VariableSummary::continuous(38.03, 26.70, 100).unwrap();
        assert_abs_diff_eq!(smd(&a, &b).unwrap(), 0.197, epsilon = 0.01);
        assert_eq!(smd(&a, &a).unwrap(), 0.0);
        let p = VariableSummary::binary(0.2143, 100).unwrap();
        let q = VariableSummary::binary(0.4061, 100).unwrap();
        assert_abs_diff_eq!(smd(&p, &q).unwrap(), 0.420, epsilon = 0.005);
        assert!(smd(&a, &p).is_err());
        assert!(smd(&VariableSummary::binary(0.0, 3).unwrap(), &VariableSummary::binary(0.0, 4).unwrap()).is_err());
    }

    #[test]
    fn bootstrap_zero_variance_and_determinism() {
        let y: Vec<f64> = (0..30).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let ci = bootstrap_ci(Metric::Brier, &y, &y, 200, 5).unwrap();
        assert_eq!((ci.lower, ci.upper), (0.0, 0.0));
        let p: Vec<f64> = (0..30).map(|i| ((i as f64) * 0.37).sin() * 0.5 + 0.5).collect();
        let a = bootstrap_ci(Metric::Auc, &p, &y, 300, 9).unwrap();
        let b = bootstrap_ci(Metric::Auc, &p, &y, 300, 9).unwrap();
        assert_eq!(a, b);
        assert!(bootstrap_ci(Metric::Auc, &p, &y, 99, 9).is_err());
    }

    #[test]
    fn bootstrap_redraws_single_class_resamples() {
        let mut y = vec![0.0; 40];
        y[7] = 1.0;
        let p: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let ci = bootstrap_ci(Metric::Auc, &p, &y, 200, 3).unwrap();
        assert!(ci.lower <= ci.upper);
        assert!((0.0..=1.0).contains(&ci.lower) && (0.0..=1.0).contains(&ci.upper));
    }
}

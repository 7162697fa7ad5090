use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::em::TracerParams;
use crate::error::{check_finite, Result, TracerError};
use crate::predictor::{predict_dataset, predict_ensemble, predict_logistic, EnsembleWeights};

pub const SCHEMA_VERSION: u32 = 1;

/// Outcome models fitted on one cohort each, used as ensemble members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baselines {
    /// Historical-only coefficients; identical to `params.eta0`.
    pub historical: Vec<f64>,
    /// Lasso logistic coefficients fitted on the current cohort alone.
    pub current: Vec<f64>,
}

/// A fitted model as written by `tracer fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub schema_version: u32,
    pub params: TracerParams,
    pub lambda1: Option<f64>,
    pub lambda2: f64,
    #[serde(default)]
    pub baselines: Option<Baselines>,
    #[serde(default)]
    pub ensemble: Option<EnsembleWeights>,
}

/// Predictions of every model held by an artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactPredictions {
    pub tracer: Vec<f64>,
    pub transition: Vec<f64>,
    pub historical: Vec<f64>,
    pub current: Option<Vec<f64>>,
    pub ensemble: Option<Vec<f64>>,
    /// Number of ensemble predictions clipped to `[0, 1]`.
    pub ensemble_clipped: usize,
}

impl ModelArtifact {
    pub fn new(params: TracerParams, lambda1: Option<f64>, lambda2: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            params,
            lambda1,
            lambda2,
            baselines: None,
            ensemble: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(TracerError::Schema(format!(
                "unsupported artifact schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.params.validate().map_err(|e| TracerError::Schema(e.to_string()))?;
        check_finite("artifact delta", &self.params.delta)?;
        if let Some(b) = &self.baselines {
            let p = self.params.eta0.len();
            if b.historical.len() != p || b.current.len() != p {
                return Err(TracerError::Schema("baseline coefficient count".into()));
            }
        }
        if self.ensemble.is_some() && self.baselines.is_none() {
            return Err(TracerError::Schema("ensemble weights without baselines".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| TracerError::Schema(format!("artifact: {e}")))?;
        a.validate()?;
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| TracerError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TracerError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Aligns `data` to the artifact's columns; fails listing the difference.
    pub fn align(&self, data: &Dataset) -> Result<Dataset> {
        data.align_to(&self.params.w_names, &self.params.a_names)
    }

    pub fn predict(&self, data: &Dataset) -> Result<ArtifactPredictions> {
        let data = self.align(data)?;
        let tr = predict_dataset(&self.params, &data)?;
        let historical = predict_logistic(&self.params.eta0, &data)?;
        let current = match &self.baselines {
            Some(b) => Some(predict_logistic(&b.current, &data)?),
            None => None,
        };
        let mut clipped = 0;
        let ensemble = match (&self.ensemble, &current) {
            (Some(w), Some(cur)) => Some(
                (0..data.len())
                    .map(|i| {
                        let (v, c) = predict_ensemble(w, [tr.probability[i], historical[i], cur[i]]);
                        clipped += c as usize;
                        v
                    })
                    .collect(),
            ),
            _ => None,
        };
        Ok(ArtifactPredictions {
            tracer: tr.probability,
            transition: tr.transition,
            historical,
            current,
            ensemble,
            ensemble_clipped: clipped,
        })
    }
}

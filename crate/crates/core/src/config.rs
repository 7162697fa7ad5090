use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::em::{EmConfig, InitStrategy};
use crate::error::{Result, TracerError};
use crate::metrics::{BootstrapConfig, MIN_BOOT};
use crate::simulation::{GridFitConfig, GridSpec, SimulationConfig};

/// Bootstrap settings for `evaluate`. `n_boot = 0` disables intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { n_boot: 0, seed: 7 }
    }
}

impl MetricsConfig {
    pub fn bootstrap(&self) -> Option<BootstrapConfig> {
        (self.n_boot > 0).then_some(BootstrapConfig {
            n_boot: self.n_boot,
            seed: self.seed,
        })
    }
}

/// The JSON document every CLI command reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// First time point at which records may have transitioned.
    pub transition_time: i64,
    pub em: EmConfig,
    pub simulation: SimulationConfig,
    pub grid: GridSpec,
    pub metrics: MetricsConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            transition_time: 100,
            em: EmConfig::default(),
            simulation: SimulationConfig::default(),
            grid: GridSpec::default(),
            metrics: MetricsConfig::default(),
            out_dir: None,
        };
        cfg.propagate();
        cfg
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| TracerError::Schema(format!("config: {e}")))?;
        cfg.propagate();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TracerError::io(path, e))?;
        Self::from_json(&text)
    }

    fn propagate(&mut self) {
        self.em.transition_time = self.transition_time;
        self.simulation.transition_time = self.transition_time;
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |e: TracerError| TracerError::Schema(e.to_string());
        self.em.validate().map_err(schema)?;
        self.simulation.validate().map_err(schema)?;
        if self.grid.prior_intercepts.is_empty() || self.grid.n_zero_coefs.is_empty() || self.grid.delta_shifts.is_empty() {
            return Err(TracerError::Schema("grid: every axis needs at least one value".into()));
        }
        if self.grid.prior_intercepts.iter().chain(&self.grid.delta_shifts).any(|v| !v.is_finite()) {
            return Err(TracerError::Schema("grid: values must be finite".into()));
        }
        if self.metrics.n_boot != 0 && self.metrics.n_boot < MIN_BOOT {
            return Err(TracerError::Schema(format!(
                "metrics.n_boot must be 0 or at least {MIN_BOOT}"
            )));
        }
        Ok(())
    }

    /// Replaces every seed in the document.
    pub fn override_seed(&mut self, seed: u64) {
        self.simulation.seed = seed;
        self.em.cv.seed = seed;
        self.metrics.seed = seed;
        if let InitStrategy::RandomBernoulli { seed: s, .. } = &mut self.em.init {
            *s = seed;
        }
    }

    pub fn grid_fit(&self) -> GridFitConfig {
        GridFitConfig {
            em: self.em.clone(),
            cv: self.em.cv.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.em.transition_time, 100);
        assert_eq!(cfg.simulation.transition_time, 100);
    }

    #[test]
    fn transition_time_reaches_submodules() {
        let cfg = ExperimentConfig::from_json(r#"{"transition_time": 12}"#).unwrap();
        assert_eq!(cfg.em.transition_time, 12);
        assert_eq!(cfg.simulation.transition_time, 12);
    }

    #[test]
    fn unknown_and_invalid_keys_are_schema_errors() {
        for doc in [
            r#"{"bogus": 1}"#,
            r#"{"em": {"max_iters": 3}}"#,
            r#"{"em": {"tol": 0.0}}"#,
            r#"{"metrics": {"n_boot": 5}}"#,
            r#"{"grid": {"delta_shifts": []}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(doc), Err(TracerError::Schema(_))), "{doc}");
        }
    }
}

//! Latent transition detection with transfer-learned logistic outcome models.
//!
//! A population drifts from a historical regime to a new one at an unknown
//! subset of records. [`em::fit`] estimates per-record transition
//! probabilities and a sparse coefficient shift on top of a frozen
//! historical model; [`predictor`] turns the fit into risk predictions.

pub mod artifact;
pub mod cli;
pub mod config;
pub mod covariate;
pub mod dataset;
pub mod em;
pub mod error;
pub mod glm;
pub mod metrics;
pub mod predictor;
pub mod simulation;

pub use artifact::ModelArtifact;
pub use config::ExperimentConfig;
pub use dataset::Dataset;
pub use em::{fit, EmConfig, EmTrace, InitStrategy, TracerParams};
pub use error::{Result, TracerError};

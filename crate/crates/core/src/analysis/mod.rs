//! Divergence measurement, scaling fits and reconstruction scoring.

mod divergence;
mod hungarian;
mod metrics;

use thiserror::Error;

pub use divergence::{
    cosine, delta_tau, estimate_cov_bar_jg, lemma1_scaling_fit, monte_carlo_expected_delta, norm, superclient_round, CovEstimate,
    DivergenceSample, MonteCarloEstimate, ScalingFit,
};
pub use hungarian::{assignment_cost, hungarian};
pub use metrics::{mse, psnr, score_reconstructions, ssim, ImageScore, MetricReport};

use crate::attack::AttackError;
use crate::fl::FlError;
use crate::models::ModelError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label}: {recon} reconstructions but {truth} ground-truth images")]
    LabelMismatch { label: usize, recon: usize, truth: usize },
    #[error("predictor is constant; the fit is undetermined")]
    DegeneratePredictor,
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

//! Fusion of a spatially unregistered hyperspectral/multispectral image pair
//! into two super-resolution spectral images.
//!
//! The pipeline has two stages. Coupled LL1 tensor unmixing ([`msr`])
//! recovers shared endmembers and both abundance sets, which re-assemble
//! into the super-resolution image over the multispectral region.
//! Adversarial abundance-patch translation ([`hsr`]) then learns a shared
//! translator that super-resolves the hyperspectral abundance maps, patch
//! by patch, with sliding-window stitching at inference time.
//!
//! Supporting modules: [`tensor`] holds the dense cube and linear-mixture
//! algebra, [`degrade`] the forward degradation operators, [`synth`] the
//! synthetic scene/patch generators used by the recovery suites, [`pm`]
//! the spectral-response estimator, [`patch`] rotated patch sampling and
//! stitching, [`nn`] the small CNN stack the translator is built from,
//! and [`metrics`] PSNR/SSIM/ERGAS.

pub mod degrade;
pub mod hsr;
pub mod linalg;
pub mod metrics;
pub mod msr;
pub mod nn;
pub mod patch;
pub mod pm;
pub mod synth;
pub mod tensor;

use thiserror::Error;

/// Errors shared across the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration or construction parameter is out of range.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A numeric abort (NaN/Inf) with diagnostic context.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Patch or scene sampling could not produce a valid draw.
    #[error("sampling failed: {0}")]
    Sampling(String),

    /// Hyperparameter search failed on every grid point.
    #[error("tuning failed: {0}")]
    Tuning(String),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Kernel-density modal regression.
//!
//! Conditional-mode estimation (single global mode and all local modes),
//! censored-response and measurement-error variants, linear modal regression
//! by modal EM, bandwidth selectors, Hausdorff-based error metrics,
//! prediction bands and bootstrap confidence bands.

pub mod bandwidth;
pub mod cli;
pub mod datagen;
pub mod density;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod modal_em;
pub mod modes;
pub mod numeric;
pub mod uncertainty;

pub use density::{
    kaplan_meier, CensorWeighting, CensoredSample, ContaminatedSample, JointDensityModel, KaplanMeier,
    Sample, Variant,
};
pub use error::{ModalError, Result};
pub use kernels::{CovariateKernel, DeconvBase, DeconvKernel, ErrorDistribution, Kernel};

//! Residual-corrective diffusion downscaling.
//!
//! A regression UNet maps bilinearly upsampled coarse fields (plus static
//! orography) to fine-grid fields through a global residual connection; an
//! EDM denoiser then samples a corrective residual on top of the regression
//! prediction. The crate also carries the synthetic data pipeline and the
//! verification metrics used to score both stages.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod nn;
pub mod regression;
pub mod store;
pub mod verification;
pub mod workers;

pub use error::{Error, Result};

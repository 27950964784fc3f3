//! Two-stage low-dose CT denoising at desk scale.
//!
//! Stage one ([`perception`]) learns dose and anatomy embeddings with
//! contrastive heads. Stage two ([`dadiff`], [`diffusion`]) is a residual
//! diffusion denoiser whose blocks are conditioned on those embeddings.
//! [`ctsim`] provides the synthetic phantom/projection/noise/FBP data
//! pipeline and [`metrics`] the image and correlation scores.

pub mod checkpoint;
pub mod ctsim;
pub mod dadiff;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod numcore;
pub mod perception;
pub mod verify;

pub use error::{Error, Result};

//! Diffusion-based causal representation learning from weakly-supervised
//! observation pairs.
//!
//! Modules, bottom-up:
//! - [`scmgen`]: ground-truth linear-Gaussian SCMs and pair datasets
//! - [`sde`]: VE diffusion schedule, score matching, reverse sampler
//! - [`encoder`]: noise encoder, intervention posterior, pair projection
//! - [`latent_scm`]: latent prior and conditional affine solution flows
//! - [`trainer`]: ELBO-derived losses, three-phase training, checkpoints
//! - [`evalx`]: alignment, DCI, interventional structure learning, SHD

pub mod encoder;
pub mod error;
pub mod evalx;
pub mod latent_scm;
pub mod nn;
pub mod scmgen;
pub mod sde;
pub mod trainer;

pub use error::{Error, Result};

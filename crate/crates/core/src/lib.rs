//! # diffinfo
//!
//! Information decomposition with denoising diffusion models.
//!
//! Given an MMSE noise predictor for the variance-preserving Gaussian channel,
//! log-densities, mutual information and conditional mutual information are
//! one-dimensional integrals over log-SNR of squared denoising errors. This
//! crate evaluates those integrals by importance sampling for any
//! [`denoisers::Denoiser`], splits them per coordinate, and checks them against
//! closed-form Gaussian and Gaussian-mixture references.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`noise_channel`] | channel, log-SNR, truncated-logistic importance sampler |
//! | [`denoisers`] | denoiser trait, closed-form Gaussian/GMM denoisers, MLP, checkpoints |
//! | [`info_estimators`] | NLL, pointwise `i^s` / `i^o`, MI, CMI, per-dimension reports |
//! | [`analytic_oracle`] | closed forms and quadrature references |
//! | [`flow_ode`] | probability-flow ODE encode/decode and interventions |
//! | [`applications`] | condition ranking, heatmap segmentation, intervention correlation |
//! | [`cli_io`] | run configuration, commands and export formats |

// `!(a < b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic_oracle;
pub mod applications;
pub mod cli_io;
pub mod denoisers;
pub mod error;
pub mod flow_ode;
pub mod info_estimators;
pub mod noise_channel;
pub mod numeric;

pub use error::{Error, Result};

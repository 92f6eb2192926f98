//! Noise-prediction denoisers.
//!
//! A [`Denoiser`] maps a corrupted point `x_alpha` at log-SNR `alpha`, with an
//! optional [`Condition`], to a prediction of the injected noise `eps`. The
//! estimators only ever talk to this trait, so closed-form optimal denoisers
//! and trained networks are interchangeable.

mod checkpoint;
mod gaussian;
mod gmm;
mod linear;
mod mlp;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::noise_channel::LogSnr;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gaussian::GaussianComponent;
pub use gmm::{gaussian_mmse, gmm_mmse, Component, ConditionEntry, GmmDenoiser, GmmSpec, LabelProb};
pub use linear::{LinearGaussianDenoiser, LinearGaussianSpec};
pub use mlp::{train_mlp, MlpDenoiser, TrainConfig, TrainOutcome};

/// A finite-vocabulary condition: an optional label token `y` plus context
/// tokens `c`. A condition with no label conditions on the context alone;
/// with neither it is equivalent to no condition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<String>,
}

impl Condition {
    pub fn label(label: impl Into<String>) -> Self {
        Condition {
            label: Some(label.into()),
            context: Vec::new(),
        }
    }

    pub fn with_context<S: Into<String>>(label: impl Into<String>, context: impl IntoIterator<Item = S>) -> Self {
        Condition {
            label: Some(label.into()),
            context: Self::normalize(context),
        }
    }

    pub fn context_only<S: Into<String>>(context: impl IntoIterator<Item = S>) -> Self {
        Condition {
            label: None,
            context: Self::normalize(context),
        }
    }

    fn normalize<S: Into<String>>(context: impl IntoIterator<Item = S>) -> Vec<String> {
        let mut c: Vec<String> = context.into_iter().map(Into::into).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Context tokens are an unordered set.
    pub fn normalized(mut self) -> Self {
        self.context.sort();
        self.context.dedup();
        self
    }

    /// The same condition with the label removed (word omission).
    pub fn without_label(&self) -> Self {
        Condition {
            label: None,
            context: self.context.clone(),
        }
    }

    /// The same context with a different label (word swap).
    pub fn with_label(&self, label: impl Into<String>) -> Self {
        Condition {
            label: Some(label.into()),
            context: self.context.clone(),
        }
    }

    pub fn is_unconditional(&self) -> bool {
        self.label.is_none() && self.context.is_empty()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label.as_deref().unwrap_or("_"))?;
        if !self.context.is_empty() {
            write!(f, "|{}", self.context.join(","))?;
        }
        Ok(())
    }
}

/// A data point with an optional condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    #[serde(default)]
    pub id: String,
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
}

impl Sample {
    pub fn new(id: impl Into<String>, x: Vec<f64>, condition: Option<Condition>) -> Self {
        Sample {
            id: id.into(),
            x,
            condition,
        }
    }
}

/// Predicts the noise `eps` from a corrupted observation.
///
/// Implementations must be deterministic and return a vector of length
/// [`Denoiser::dim`].
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn predict_eps(&self, x_alpha: &[f64], alpha: LogSnr, condition: Option<&Condition>) -> Result<Vec<f64>>;
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_eps(&self, x_alpha: &[f64], alpha: LogSnr, condition: Option<&Condition>) -> Result<Vec<f64>> {
        (**self).predict_eps(x_alpha, alpha, condition)
    }
}

impl<T: Denoiser + ?Sized> Denoiser for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_eps(&self, x_alpha: &[f64], alpha: LogSnr, condition: Option<&Condition>) -> Result<Vec<f64>> {
        (**self).predict_eps(x_alpha, alpha, condition)
    }
}

/// Denoiser that always predicts zero noise; it carries no information.
#[derive(Debug, Clone, Copy)]
pub struct ZeroDenoiser {
    pub dim: usize,
}

impl Denoiser for ZeroDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_eps(&self, x_alpha: &[f64], _alpha: LogSnr, _condition: Option<&Condition>) -> Result<Vec<f64>> {
        check_dim("x_alpha", self.dim, x_alpha.len())?;
        Ok(vec![0.0; self.dim])
    }
}

/// Monte-Carlo MSE per dimension of `denoiser` at a fixed noise level over
/// `n` corruptions of points drawn uniformly from `data`. Returns
/// `(mean, standard error)`. With `conditional`, each sample's own condition
/// is passed to the denoiser.
pub fn empirical_mse(
    denoiser: &dyn Denoiser,
    data: &[Sample],
    alpha: LogSnr,
    conditional: bool,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::seq::IndexedRandom;
    if data.is_empty() {
        return Err(crate::error::Error::EmptyDataset);
    }
    let mut rng = crate::numeric::rng_for(seed, 0);
    let d = denoiser.dim() as f64;
    let mut errs = Vec::with_capacity(n);
    for _ in 0..n {
        let s = data.choose(&mut rng).expect("non-empty");
        let ns = crate::noise_channel::corrupt_with(&s.x, alpha, &mut rng);
        let cond = if conditional { s.condition.as_ref() } else { None };
        let e = denoiser.predict_eps(&ns.x_alpha, alpha, cond)?;
        errs.push(ns.eps.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d);
    }
    Ok((crate::numeric::mean(&errs), crate::numeric::std_error(&errs)))
}

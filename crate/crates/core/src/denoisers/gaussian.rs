//! Closed-form noise posterior for a single Gaussian source.
//!
//! For `x ~ N(mu, Sigma)` and `x_alpha = a x + b eps` with `a = sqrt(sigmoid(alpha))`,
//! `b = sqrt(sigmoid(-alpha))`, the pair `(eps, x_alpha)` is jointly Gaussian with
//! `Cov(x_alpha) = S = a^2 Sigma + b^2 I` and `Cov(eps, x_alpha) = b I`, hence
//!
//! ```text
//! E[eps | x_alpha] = b S^{-1} (x_alpha - a mu)
//! ```
//!
//! `Sigma` is diagonalized once (`Sigma = V diag(lambda) V^T`) so that for every
//! `alpha` the noisy covariance is `V diag(a^2 lambda + b^2) V^T`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::noise_channel::LogSnr;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A Gaussian with a cached eigendecomposition of its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    mean: Vec<f64>,
    eigvals: Vec<f64>,
    /// Row-major `d x d` eigenvector matrix; `None` when the covariance is diagonal.
    rotation: Option<Vec<f64>>,
}

/// Output of evaluating one component at a corrupted point.
#[derive(Debug, Clone)]
pub(crate) struct ComponentEval {
    pub eps_hat: Vec<f64>,
    pub log_density: f64,
}

pub(crate) fn validate_covariance(cov: &DMatrix<f64>, what: &str) -> Result<()> {
    let d = cov.nrows();
    if cov.ncols() != d {
        return Err(Error::Spec(format!(
            "{what}: covariance is {}x{}, not square",
            d,
            cov.ncols()
        )));
    }
    for i in 0..d {
        for j in 0..i {
            let (u, l) = (cov[(i, j)], cov[(j, i)]);
            if (u - l).abs() > 1e-12 * (1.0 + u.abs().max(l.abs())) {
                return Err(Error::Spec(format!("{what}: covariance not symmetric at ({i},{j})")));
            }
        }
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Spec(format!("{what}: covariance has non-finite entries")));
    }
    if cov.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(what.to_string()));
    }
    Ok(())
}

impl GaussianComponent {
    pub fn new(mean: Vec<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        check_dim("covariance", mean.len(), cov.nrows())?;
        validate_covariance(cov, "gaussian component")?;
        let d = mean.len();
        let is_diag = (0..d).all(|i| (0..d).all(|j| i == j || cov[(i, j)] == 0.0));
        if is_diag {
            return Ok(GaussianComponent {
                mean,
                eigvals: (0..d).map(|i| cov[(i, i)]).collect(),
                rotation: None,
            });
        }
        let eig = SymmetricEigen::new(cov.clone());
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::NotPositiveDefinite("gaussian component".into()));
        }
        let mut rotation = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                rotation[i * d + j] = eig.eigenvectors[(i, j)];
            }
        }
        Ok(GaussianComponent {
            mean,
            eigvals: eig.eigenvalues.iter().copied().collect(),
            rotation: Some(rotation),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `E[eps | x_alpha]` under this component alone.
    pub fn eps_hat(&self, x_alpha: &[f64], alpha: LogSnr) -> Result<Vec<f64>> {
        check_dim("x_alpha", self.dim(), x_alpha.len())?;
        Ok(self.evaluate(x_alpha, alpha, None).eps_hat)
    }

    /// Log density of `x_alpha` under the corrupted component `N(a mu, a^2 Sigma + b^2 I)`.
    pub fn log_density_noisy(&self, x_alpha: &[f64], alpha: LogSnr) -> Result<f64> {
        check_dim("x_alpha", self.dim(), x_alpha.len())?;
        Ok(self.evaluate(x_alpha, alpha, None).log_density)
    }

    /// Evaluates posterior noise mean and log density. `mean` overrides the
    /// stored mean (used by conditionals that share a covariance).
    pub(crate) fn evaluate(&self, x_alpha: &[f64], alpha: LogSnr, mean: Option<&[f64]>) -> ComponentEval {
        let d = self.dim();
        let (a, b) = alpha.scales();
        let (a2, b2) = (a * a, b * b);
        let mu = mean.unwrap_or(&self.mean);
        let diff: Vec<f64> = x_alpha.iter().zip(mu).map(|(x, m)| x - a * m).collect();

        let mut log_det = 0.0;
        let mut quad = 0.0;
        let eps_hat = match &self.rotation {
            None => {
                let mut out = Vec::with_capacity(d);
                for (di, li) in diff.iter().zip(&self.eigvals) {
                    let s = a2 * li + b2;
                    log_det += s.ln();
                    quad += di * di / s;
                    out.push(b * di / s);
                }
                out
            }
            Some(v) => {
                // r = V^T diff, scaled by 1/s, then rotated back.
                let mut scaled = vec![0.0; d];
                for j in 0..d {
                    let mut r = 0.0;
                    for i in 0..d {
                        r += v[i * d + j] * diff[i];
                    }
                    let s = a2 * self.eigvals[j] + b2;
                    log_det += s.ln();
                    quad += r * r / s;
                    scaled[j] = r / s;
                }
                (0..d)
                    .map(|i| b * (0..d).map(|j| v[i * d + j] * scaled[j]).sum::<f64>())
                    .collect()
            }
        };
        ComponentEval {
            eps_hat,
            log_density: -0.5 * (d as f64 * LN_2PI + log_det + quad),
        }
    }
}

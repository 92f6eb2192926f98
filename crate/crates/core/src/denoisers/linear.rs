//! Jointly Gaussian `(x, y)` with `y` observed through a fine quantizer.
//!
//! Labels are bucket indices `b:i0,i1,...`; bucket `i` stands for the value
//! `i * bucket_width`. The conditional source given a bucket is the Gaussian
//! regression `N(mu_x + K (y_c - mu_y), Sigma_x|y)` with
//! `K = Sigma_xy Sigma_yy^{-1}`. Samples are generated the same way (draw `y`,
//! snap it to its bucket center, then draw `x | y_c`), so the conditional
//! denoiser is exact for the data it is evaluated on.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gaussian::{validate_covariance, GaussianComponent};
use super::{Condition, Denoiser, Sample};
use crate::error::{check_dim, Error, Result};
use crate::noise_channel::LogSnr;
use crate::numeric::standard_normal_vec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGaussianSpec {
    /// Number of leading coordinates that form `x`; the rest form `y`.
    pub x_dim: usize,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    #[serde(default = "default_bucket_width")]
    pub bucket_width: f64,
}

fn default_bucket_width() -> f64 {
    1e-3
}

impl LinearGaussianSpec {
    /// Standard bivariate normal with correlation `rho`.
    pub fn bivariate(rho: f64) -> Self {
        LinearGaussianSpec {
            x_dim: 1,
            mean: vec![0.0, 0.0],
            covariance: vec![vec![1.0, rho], vec![rho, 1.0]],
            bucket_width: default_bucket_width(),
        }
    }

    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let n = self.mean.len();
        DMatrix::from_fn(n, n, |i, j| self.covariance[i][j])
    }

    pub fn y_dim(&self) -> usize {
        self.mean.len() - self.x_dim
    }

    pub fn bucket_label(&self, y: &[f64]) -> String {
        let idx: Vec<String> = y
            .iter()
            .map(|v| format!("{}", (v / self.bucket_width).round() as i64))
            .collect();
        format!("b:{}", idx.join(","))
    }

    pub fn bucket_center(&self, label: &str) -> Result<Vec<f64>> {
        let body = label
            .strip_prefix("b:")
            .ok_or_else(|| Error::UnknownCondition(label.to_string()))?;
        let vals: Vec<f64> = body
            .split(',')
            .map(|s| s.parse::<i64>().map(|i| i as f64 * self.bucket_width))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::UnknownCondition(label.to_string()))?;
        check_dim("bucket label", self.y_dim(), vals.len())?;
        Ok(vals)
    }
}

/// Exact denoisers for [`LinearGaussianSpec`] data, conditional on bucket labels.
#[derive(Debug, Clone)]
pub struct LinearGaussianDenoiser {
    spec: LinearGaussianSpec,
    marginal: GaussianComponent,
    conditional: GaussianComponent,
    /// `K = Sigma_xy Sigma_yy^{-1}`.
    gain: DMatrix<f64>,
    cond_chol: DMatrix<f64>,
    y_chol: DMatrix<f64>,
}

impl LinearGaussianDenoiser {
    pub fn new(spec: LinearGaussianSpec) -> Result<Self> {
        let n = spec.mean.len();
        if spec.x_dim == 0 || spec.x_dim >= n {
            return Err(Error::Spec(format!("x_dim {} must be in 1..{}", spec.x_dim, n)));
        }
        check_dim("covariance rows", n, spec.covariance.len())?;
        for row in &spec.covariance {
            check_dim("covariance row", n, row.len())?;
        }
        if !(spec.bucket_width > 0.0) {
            return Err(Error::Spec("bucket_width must be positive".into()));
        }
        let cov = spec.joint_covariance();
        validate_covariance(&cov, "joint covariance")?;
        let dx = spec.x_dim;
        let dy = n - dx;
        let sxx = cov.view((0, 0), (dx, dx)).into_owned();
        let sxy = cov.view((0, dx), (dx, dy)).into_owned();
        let syy = cov.view((dx, dx), (dy, dy)).into_owned();
        let syy_inv = syy
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite("y covariance".into()))?;
        let gain = &sxy * syy_inv;
        let cond_cov = &sxx - &gain * sxy.transpose();
        let cond_cov = (&cond_cov + cond_cov.transpose()) * 0.5;
        let marginal = GaussianComponent::new(spec.mean[..dx].to_vec(), &sxx)?;
        let conditional = GaussianComponent::new(spec.mean[..dx].to_vec(), &cond_cov)?;
        let cond_chol = cond_cov
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("conditional covariance".into()))?
            .l();
        let y_chol = syy
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("y covariance".into()))?
            .l();
        Ok(LinearGaussianDenoiser {
            spec,
            marginal,
            conditional,
            gain,
            cond_chol,
            y_chol,
        })
    }

    pub fn spec(&self) -> &LinearGaussianSpec {
        &self.spec
    }

    /// `E[x | y = y_c]` for a bucket label.
    pub fn conditional_mean(&self, label: &str) -> Result<Vec<f64>> {
        let yc = self.spec.bucket_center(label)?;
        let dx = self.spec.x_dim;
        let centered = DVector::from_iterator(yc.len(), yc.iter().zip(&self.spec.mean[dx..]).map(|(y, m)| y - m));
        let shift = &self.gain * centered;
        Ok((0..dx).map(|i| self.spec.mean[i] + shift[i]).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Sample>> {
        let dx = self.spec.x_dim;
        let dy = self.spec.y_dim();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let zy = DVector::from_vec(standard_normal_vec(rng, dy));
            let yv = &self.y_chol * zy;
            let y: Vec<f64> = (0..dy).map(|j| self.spec.mean[dx + j] + yv[j]).collect();
            let label = self.spec.bucket_label(&y);
            let mu = self.conditional_mean(&label)?;
            let zx = DVector::from_vec(standard_normal_vec(rng, dx));
            let xv = &self.cond_chol * zx;
            let x = (0..dx).map(|j| mu[j] + xv[j]).collect();
            out.push(Sample::new(format!("s{i}"), x, Some(Condition::label(label))));
        }
        Ok(out)
    }
}

impl Denoiser for LinearGaussianDenoiser {
    fn dim(&self) -> usize {
        self.spec.x_dim
    }

    fn predict_eps(&self, x_alpha: &[f64], alpha: LogSnr, condition: Option<&Condition>) -> Result<Vec<f64>> {
        check_dim("x_alpha", self.spec.x_dim, x_alpha.len())?;
        match condition.and_then(|c| c.label.as_deref()) {
            None => Ok(self.marginal.evaluate(x_alpha, alpha, None).eps_hat),
            Some(label) => {
                let mu = self.conditional_mean(label)?;
                Ok(self.conditional.evaluate(x_alpha, alpha, Some(&mu)).eps_hat)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng_for;

    #[test]
    fn bucket_labels_round_trip() {
        let spec = LinearGaussianSpec::bivariate(0.8);
        let l = spec.bucket_label(&[1.23456]);
        assert_eq!(l, "b:1235");
        assert!((spec.bucket_center(&l).unwrap()[0] - 1.235).abs() < 1e-12);
        assert!(spec.bucket_center("a:3").is_err());
    }

    #[test]
    fn conditional_regression_matches_textbook() {
        let den = LinearGaussianDenoiser::new(LinearGaussianSpec::bivariate(0.8)).unwrap();
        let mu = den.conditional_mean("b:2000").unwrap();
        assert!((mu[0] - 1.6).abs() < 1e-12);
        // Conditional variance 1 - rho^2 = 0.36: at alpha -> +inf eps_hat -> 0,
        // at alpha = 0 eps_hat = b (x - a mu) / (a^2 0.36 + b^2).
        let alpha = LogSnr(0.0);
        let (a, b) = alpha.scales();
        let x = 0.5;
        let e = den.predict_eps(&[x], alpha, Some(&Condition::label("b:2000"))).unwrap()[0];
        let want = b * (x - a * 1.6) / (a * a * 0.36 + b * b);
        assert!((e - want).abs() < 1e-12);
    }

    #[test]
    fn samples_have_expected_correlation() {
        let den = LinearGaussianDenoiser::new(LinearGaussianSpec::bivariate(0.8)).unwrap();
        let mut rng = rng_for(3, 0);
        let s = den.sample(20_000, &mut rng).unwrap();
        let pairs: Vec<(f64, f64)> = s
            .iter()
            .map(|s| {
                let y = den
                    .spec()
                    .bucket_center(s.condition.as_ref().unwrap().label.as_ref().unwrap())
                    .unwrap()[0];
                (s.x[0], y)
            })
            .collect();
        let n = pairs.len() as f64;
        let sxy: f64 = pairs.iter().map(|p| p.0 * p.1).sum::<f64>() / n;
        assert!((sxy - 0.8).abs() < 0.03, "{sxy}");
    }
}

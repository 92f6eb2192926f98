//! Variance-preserving Gaussian noise channel parametrized by log-SNR.
//!
//! A clean point `x` is corrupted at log-SNR `alpha` as
//!
//! ```text
//! x_alpha = sqrt(sigmoid(alpha)) * x + sqrt(sigmoid(-alpha)) * eps,   eps ~ N(0, I)
//! ```
//!
//! so `snr = exp(alpha)`. Integrals over noise levels are evaluated by
//! importance sampling from a logistic distribution truncated to
//! `[loc - clip * scale, loc + clip * scale]`; the pdf is renormalized over that
//! interval and contributions outside it are treated as zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{rng_for, standard_normal_vec};

/// Logistic sigmoid, evaluated without overflow for either sign.
#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Log signal-to-noise ratio of the channel.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogSnr(pub f64);

impl LogSnr {
    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn snr(self) -> f64 {
        self.0.exp()
    }

    /// `sigmoid(alpha)`, the variance weight on the clean signal.
    #[inline]
    pub fn signal_weight(self) -> f64 {
        sigmoid(self.0)
    }

    /// `sigmoid(-alpha)`, the variance weight on the noise.
    #[inline]
    pub fn noise_weight(self) -> f64 {
        sigmoid(-self.0)
    }

    /// `(sqrt(sigmoid(alpha)), sqrt(sigmoid(-alpha)))`.
    #[inline]
    pub fn scales(self) -> (f64, f64) {
        (self.signal_weight().sqrt(), self.noise_weight().sqrt())
    }
}

impl From<f64> for LogSnr {
    fn from(a: f64) -> Self {
        LogSnr(a)
    }
}

/// A corrupted observation together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x_alpha: Vec<f64>,
    pub eps: Vec<f64>,
    pub alpha: LogSnr,
}

/// Corrupts `x` with caller-supplied noise `eps` at level `alpha`.
pub fn corrupt(x: &[f64], alpha: LogSnr, eps: &[f64]) -> Result<NoisySample> {
    check_dim("eps", x.len(), eps.len())?;
    let (a, b) = alpha.scales();
    let x_alpha = x.iter().zip(eps).map(|(xi, ei)| a * xi + b * ei).collect();
    Ok(NoisySample {
        x_alpha,
        eps: eps.to_vec(),
        alpha,
    })
}

/// Corrupts `x` with noise drawn from `rng`.
pub fn corrupt_with<R: Rng + ?Sized>(x: &[f64], alpha: LogSnr, rng: &mut R) -> NoisySample {
    let eps = standard_normal_vec(rng, x.len());
    let (a, b) = alpha.scales();
    let x_alpha = x.iter().zip(&eps).map(|(xi, ei)| a * xi + b * ei).collect();
    NoisySample { x_alpha, eps, alpha }
}

/// Writes `sqrt(sigmoid(alpha)) x + sqrt(sigmoid(-alpha)) eps` into `out`.
#[inline]
pub(crate) fn corrupt_into(x: &[f64], eps: &[f64], alpha: LogSnr, out: &mut [f64]) {
    let (a, b) = alpha.scales();
    for ((o, xi), ei) in out.iter_mut().zip(x).zip(eps) {
        *o = a * xi + b * ei;
    }
}

/// One importance draw: a noise level and its weight `1 / pdf(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrDraw {
    pub alpha: LogSnr,
    pub weight: f64,
}

/// Truncated-logistic importance distribution over log-SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSnrSampler {
    loc: f64,
    scale: f64,
    clip: f64,
    n_draws: usize,
}

impl Default for LogSnrSampler {
    fn default() -> Self {
        LogSnrSampler {
            loc: 1.0,
            scale: 2.0,
            clip: 3.0,
            n_draws: 100,
        }
    }
}

impl LogSnrSampler {
    pub fn new(loc: f64, scale: f64, clip: f64, n_draws: usize) -> Result<Self> {
        if !loc.is_finite() {
            return Err(Error::Config(format!("sampler loc must be finite, got {loc}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("sampler scale must be > 0, got {scale}")));
        }
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(Error::Config(format!("sampler clip must be > 0, got {clip}")));
        }
        if n_draws == 0 {
            return Err(Error::Config("sampler n_draws must be positive".into()));
        }
        Ok(LogSnrSampler {
            loc,
            scale,
            clip,
            n_draws,
        })
    }

    pub fn with_draws(mut self, n_draws: usize) -> Result<Self> {
        if n_draws == 0 {
            return Err(Error::Config("sampler n_draws must be positive".into()));
        }
        self.n_draws = n_draws;
        Ok(self)
    }

    pub fn loc(&self) -> f64 {
        self.loc
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    /// Integration interval `[loc - clip*scale, loc + clip*scale]`.
    pub fn interval(&self) -> (f64, f64) {
        (self.loc - self.clip * self.scale, self.loc + self.clip * self.scale)
    }

    fn mass(&self) -> f64 {
        sigmoid(self.clip) - sigmoid(-self.clip)
    }

    /// Density of the truncated logistic; zero outside the interval.
    pub fn pdf(&self, alpha: f64) -> f64 {
        let (lo, hi) = self.interval();
        if alpha < lo || alpha > hi {
            return 0.0;
        }
        let z = (alpha - self.loc) / self.scale;
        sigmoid(z) * sigmoid(-z) / (self.scale * self.mass())
    }

    /// Draws one level by inverting the truncated cdf.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> SnrDraw {
        let lo_p = sigmoid(-self.clip);
        let hi_p = sigmoid(self.clip);
        let u: f64 = rng.random();
        let p = lo_p + u * (hi_p - lo_p);
        let z = (p / (1.0 - p)).ln().clamp(-self.clip, self.clip);
        let alpha = self.loc + self.scale * z;
        SnrDraw {
            alpha: LogSnr(alpha),
            weight: 1.0 / self.pdf(alpha),
        }
    }

    pub fn draws<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<SnrDraw> {
        (0..self.n_draws).map(|_| self.draw(rng)).collect()
    }

    /// `n_draws` importance draws from a generator seeded with `seed`.
    pub fn sample(&self, seed: u64) -> Vec<SnrDraw> {
        let mut rng = rng_for(seed, 0);
        self.draws(&mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{mean, std_error};
    use proptest::prelude::*;

    #[test]
    fn corrupt_at_high_snr_returns_signal() {
        let x = [0.3, -1.7, 2.5];
        let eps = [1.0, -2.0, 0.5];
        let s = corrupt(&x, LogSnr(40.0), &eps).unwrap();
        for (xa, xi) in s.x_alpha.iter().zip(&x) {
            assert!((xa - xi).abs() < 1e-8);
        }
    }

    #[test]
    fn corrupt_at_zero_logsnr_mixes_evenly() {
        let s = corrupt(&[1.0, 1.0], LogSnr(0.0), &[1.0, -1.0]).unwrap();
        assert!((s.x_alpha[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(s.x_alpha[1].abs() < 1e-15);
    }

    #[test]
    fn corrupt_zero_signal_is_scaled_noise() {
        let eps = [0.4, -1.1];
        for a in [-3.0, 0.0, 2.5] {
            let s = corrupt(&[0.0, 0.0], LogSnr(a), &eps).unwrap();
            let b = sigmoid(-a).sqrt();
            assert_eq!(s.x_alpha, vec![b * eps[0], b * eps[1]]);
        }
    }

    #[test]
    fn corrupt_rejects_mismatched_dims() {
        let err = corrupt(&[1.0, 2.0], LogSnr(0.0), &[1.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn sampler_rejects_bad_parameters() {
        assert!(LogSnrSampler::new(1.0, 0.0, 3.0, 10).is_err());
        assert!(LogSnrSampler::new(1.0, 2.0, -1.0, 10).is_err());
        assert!(LogSnrSampler::new(1.0, 2.0, 3.0, 0).is_err());
    }

    #[test]
    fn default_draws_stay_in_default_range() {
        let s = LogSnrSampler::default().with_draws(20_000).unwrap();
        assert_eq!(s.interval(), (-5.0, 7.0));
        for d in s.sample(3) {
            assert!((-5.0..=7.0).contains(&d.alpha.0));
            assert!(d.weight > 0.0);
        }
    }

    #[test]
    fn constant_integrand_recovers_interval_length() {
        let s = LogSnrSampler::default().with_draws(20_000).unwrap();
        let w: Vec<f64> = s.sample(11).iter().map(|d| d.weight).collect();
        let est = mean(&w);
        let se = std_error(&w);
        assert!((est - 12.0).abs() < 3.0 * se, "{est} ± {se}");
    }

    #[test]
    fn empirical_mean_equals_loc() {
        let s = LogSnrSampler::default().with_draws(100_000).unwrap();
        let a: Vec<f64> = s.sample(5).iter().map(|d| d.alpha.0).collect();
        assert!((mean(&a) - 1.0).abs() < 0.05);
    }

    #[test]
    fn sigmoid_integral_matches_trapezoid() {
        // Trapezoid reference on 10^4 nodes.
        let s = LogSnrSampler::default().with_draws(20_000).unwrap();
        let (lo, hi) = s.interval();
        let n = 10_000;
        let h = (hi - lo) / n as f64;
        let mut quad = 0.5 * (sigmoid(lo) + sigmoid(hi));
        for i in 1..n {
            quad += sigmoid(lo + i as f64 * h);
        }
        quad *= h;
        let vals: Vec<f64> = s.sample(17).iter().map(|d| d.weight * sigmoid(d.alpha.0)).collect();
        let est = mean(&vals);
        let se = std_error(&vals);
        assert!((est - quad).abs() < 3.0 * se, "{est} vs {quad} ± {se}");
    }

    #[test]
    fn pdf_integrates_to_one() {
        let s = LogSnrSampler::new(0.5, 1.5, 2.0, 1).unwrap();
        let (lo, hi) = s.interval();
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * s.pdf(lo + i as f64 * h)
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(s.pdf(hi + 0.1), 0.0);
    }

    #[test]
    fn same_seed_same_draws() {
        let s = LogSnrSampler::default();
        assert_eq!(s.sample(9), s.sample(9));
        assert_ne!(s.sample(9), s.sample(10));
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(a in -700.0f64..700.0) {
            let sum = sigmoid(a) + sigmoid(-a);
            prop_assert!((sum - 1.0).abs() <= 2.0 * f64::EPSILON);
        }

        #[test]
        fn corrupt_is_affine(
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            eps in proptest::collection::vec(-3.0f64..3.0, 3),
            scale in -4.0f64..4.0,
            a in -8.0f64..8.0,
        ) {
            let alpha = LogSnr(a);
            let base = corrupt(&[0.0; 3], alpha, &eps).unwrap().x_alpha;
            let ax: Vec<f64> = x.iter().map(|v| scale * v).collect();
            let lhs = corrupt(&ax, alpha, &eps).unwrap().x_alpha;
            let rhs = corrupt(&x, alpha, &eps).unwrap().x_alpha;
            for i in 0..3 {
                let l = lhs[i] - base[i];
                let r = scale * (rhs[i] - base[i]);
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }
}

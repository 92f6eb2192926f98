//! Probability-flow ODE of the channel, driven by a noise predictor.
//!
//! For `x_alpha = a x + b eps` with `a^2 = sigmoid(alpha)`, `b^2 = sigmoid(-alpha)`
//! the score is `-eps_hat / b` and the probability-flow ODE is
//!
//! ```text
//! dx/dalpha = 1/2 sigmoid(-alpha) x - 1/2 sqrt(sigmoid(-alpha)) eps_hat(x, alpha)
//! ```
//!
//! In the rescaled state `y = x / a` this becomes
//! `dy/dalpha = -1/2 exp(-alpha/2) eps_hat(a y, alpha)`, whose linear part is
//! gone: with `eps_hat = 0` the state `y` is constant and
//! `x(alpha_min) = x(alpha_max) * a(alpha_min) / a(alpha_max)` exactly. Heun's
//! method is applied to `y` on a uniform log-SNR grid; every step, including
//! the last, is a full predictor-corrector step because both grid endpoints
//! are ordinary evaluation points. Stored states are always `x_alpha`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::denoisers::{Condition, Denoiser};
use crate::error::{check_dim, Error, Result};
use crate::noise_channel::LogSnr;
use crate::numeric::format_float;

/// Placement of the log-SNR nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    UniformAlpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub n_steps: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub spacing: Spacing,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n_steps: 100,
            alpha_min: -5.0,
            alpha_max: 7.0,
            spacing: Spacing::UniformAlpha,
        }
    }
}

impl SolverConfig {
    pub fn with_steps(self, n_steps: usize) -> Self {
        SolverConfig { n_steps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("solver.n_steps must be at least 1".into()));
        }
        if !(self.alpha_min < self.alpha_max) || !self.alpha_min.is_finite() || !self.alpha_max.is_finite() {
            return Err(Error::Config(format!(
                "solver needs finite alpha_min < alpha_max, got [{}, {}]",
                self.alpha_min, self.alpha_max
            )));
        }
        Ok(())
    }

    /// Nodes in increasing log-SNR.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.n_steps;
        let span = self.alpha_max - self.alpha_min;
        match self.spacing {
            Spacing::UniformAlpha => (0..=n)
                .map(|k| {
                    if k == n {
                        self.alpha_max
                    } else {
                        self.alpha_min + span * (k as f64 / n as f64)
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Data to latent: decreasing log-SNR.
    Encode,
    /// Latent to data: increasing log-SNR.
    Decode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub direction: Direction,
    pub steps: Vec<(LogSnr, Vec<f64>)>,
}

impl Trajectory {
    /// Final state: the latent for an encode, the data point for a decode.
    pub fn terminal(&self) -> &[f64] {
        &self.steps.last().expect("trajectories are never empty").1
    }

    pub fn initial(&self) -> &[f64] {
        &self.steps[0].1
    }

    /// `step,alpha,x0,x1,...` with round-trip-exact numbers.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.steps[0].1.len();
        let mut header = vec!["step".to_string(), "alpha".to_string()];
        header.extend((0..d).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (i, (alpha, x)) in self.steps.iter().enumerate() {
            let mut rec = vec![i.to_string(), format_float(alpha.0)];
            rec.extend(x.iter().map(|v| format_float(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn integrate(
    start: &[f64],
    denoiser: &dyn Denoiser,
    condition: Option<&Condition>,
    nodes: &[f64],
    direction: Direction,
) -> Result<Trajectory> {
    check_dim("state", denoiser.dim(), start.len())?;
    if start.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState {
            step: 0,
            alpha: nodes[0],
        });
    }
    let drift = |y: &[f64], alpha: f64| -> Result<Vec<f64>> {
        let a = LogSnr(alpha).scales().0;
        let x: Vec<f64> = y.iter().map(|v| a * v).collect();
        let e = denoiser.predict_eps(&x, LogSnr(alpha), condition)?;
        let c = -0.5 * (-alpha / 2.0).exp();
        Ok(e.into_iter().map(|v| c * v).collect())
    };
    let a0 = LogSnr(nodes[0]).scales().0;
    let mut y: Vec<f64> = start.iter().map(|v| v / a0).collect();
    let mut steps = Vec::with_capacity(nodes.len());
    steps.push((LogSnr(nodes[0]), start.to_vec()));
    for (n, w) in nodes.windows(2).enumerate() {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let f0 = drift(&y, t0)?;
        let pred: Vec<f64> = y.iter().zip(&f0).map(|(y, f)| y + h * f).collect();
        let f1 = drift(&pred, t1)?;
        for j in 0..y.len() {
            y[j] += 0.5 * h * (f0[j] + f1[j]);
        }
        let a1 = LogSnr(t1).scales().0;
        let x: Vec<f64> = y.iter().map(|v| a1 * v).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: n + 1, alpha: t1 });
        }
        steps.push((LogSnr(t1), x));
    }
    Ok(Trajectory { direction, steps })
}

/// Integrates from `alpha_max` down to `alpha_min`; the terminal state is the latent.
pub fn encode(
    x: &[f64],
    denoiser: &dyn Denoiser,
    condition: Option<&Condition>,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut nodes = cfg.grid();
    nodes.reverse();
    integrate(x, denoiser, condition, &nodes, Direction::Encode)
}

/// Integrates from `alpha_min` up to `alpha_max`.
pub fn decode(
    latent: &[f64],
    denoiser: &dyn Denoiser,
    condition: Option<&Condition>,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    integrate(latent, denoiser, condition, &cfg.grid(), Direction::Decode)
}

/// `||decode(encode(x)) - x|| / ||x||`.
pub fn round_trip_error(
    x: &[f64],
    denoiser: &dyn Denoiser,
    condition: Option<&Condition>,
    cfg: &SolverConfig,
) -> Result<f64> {
    let r = intervene(x, denoiser, condition, condition, cfg)?;
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate("relative error of the zero vector".into()));
    }
    Ok(r.l2 / norm)
}

/// Result of editing a point by swapping its condition along the flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub latent: Vec<f64>,
    pub edited: Vec<f64>,
    /// Per-coordinate squared change.
    pub delta_sq: Vec<f64>,
    /// Euclidean norm of the change.
    pub l2: f64,
}

/// Encodes under `cond_in` and decodes under `cond_out`.
pub fn intervene(
    x: &[f64],
    denoiser: &dyn Denoiser,
    cond_in: Option<&Condition>,
    cond_out: Option<&Condition>,
    cfg: &SolverConfig,
) -> Result<Intervention> {
    let latent = encode(x, denoiser, cond_in, cfg)?.terminal().to_vec();
    let edited = decode(&latent, denoiser, cond_out, cfg)?.terminal().to_vec();
    let delta_sq: Vec<f64> = x.iter().zip(&edited).map(|(a, b)| (a - b) * (a - b)).collect();
    let l2 = delta_sq.iter().sum::<f64>().sqrt();
    Ok(Intervention {
        latent,
        edited,
        delta_sq,
        l2,
    })
}

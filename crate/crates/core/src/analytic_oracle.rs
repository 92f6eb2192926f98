//! Ground-truth values the estimators are checked against.
//!
//! Everything here is computed from the model specification alone, with its
//! own Gaussian density code: closed forms for Gaussians, tensor-product
//! trapezoid quadrature with step halving for mixtures in one or two
//! dimensions, and plain Monte Carlo over the joint beyond that. None of it
//! goes through a [`Denoiser`](crate::denoisers::Denoiser).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::{Condition, GmmSpec};
use crate::error::{check_dim, Error, Result};
use crate::noise_channel::LogSnr;
use crate::numeric::{log_sum_exp, pairwise_sum, rng_for, standard_normal_vec, std_error};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    ClosedForm,
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Nats, or a probability for classifier accuracies.
    pub value: f64,
    pub method: OracleMethod,
    /// Last step-halving change for quadrature, one standard error for Monte
    /// Carlo, zero for closed forms.
    pub abs_error_bound: f64,
}

impl OracleResult {
    fn exact(value: f64) -> Self {
        OracleResult {
            value,
            method: OracleMethod::ClosedForm,
            abs_error_bound: 0.0,
        }
    }
}

/// `I(X;Y)` of a bivariate Gaussian with correlation `rho`.
pub fn gaussian_mi(rho: f64) -> Result<OracleResult> {
    if !(rho.abs() < 1.0) {
        return Err(Error::Config(format!("correlation {rho} must lie in (-1, 1)")));
    }
    Ok(OracleResult::exact(-0.5 * (1.0 - rho * rho).ln()))
}

/// Per-dimension MMSE of noise prediction for `N(mu, variance I)` data:
/// `variance * snr / (1 + variance * snr)`.
pub fn mmse_gaussian(variance: f64, alpha: LogSnr) -> Result<OracleResult> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::Config(format!(
            "variance {variance} must be a finite non-negative number"
        )));
    }
    if variance == 0.0 {
        return Ok(OracleResult::exact(0.0));
    }
    let t = alpha.0 + variance.ln();
    let v = if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        t.exp() / (1.0 + t.exp())
    };
    Ok(OracleResult::exact(v))
}

/// `log p(x|y) - log p(x)` for a zero-mean jointly Gaussian `(x, y)` whose
/// covariance has `x` in the leading block.
pub fn gaussian_pointwise(x: &[f64], y: &[f64], joint_cov: &DMatrix<f64>) -> Result<OracleResult> {
    let (dx, dy) = (x.len(), y.len());
    check_dim("joint covariance", dx + dy, joint_cov.nrows())?;
    check_dim("joint covariance columns", dx + dy, joint_cov.ncols())?;
    if joint_cov.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("joint covariance".into()));
    }
    let sxx = joint_cov.view((0, 0), (dx, dx)).into_owned();
    let sxy = joint_cov.view((0, dx), (dx, dy)).into_owned();
    let syy = joint_cov.view((dx, dx), (dy, dy)).into_owned();
    let syy_inv = syy
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("y block".into()))?
        .inverse();
    let gain = &sxy * syy_inv;
    let cond_mean = &gain * nalgebra::DVector::from_column_slice(y);
    let cond_cov = &sxx - &gain * sxy.transpose();
    let conditional = LogGauss::new(cond_mean.as_slice(), &cond_cov)?;
    let marginal = LogGauss::new(&vec![0.0; dx], &sxx)?;
    Ok(OracleResult::exact(conditional.eval(x) - marginal.eval(x)))
}

/// Gaussian log-density with a precomputed precision matrix.
struct LogGauss {
    mean: Vec<f64>,
    precision: Vec<f64>,
    log_norm: f64,
}

impl LogGauss {
    fn new(mean: &[f64], cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("oracle covariance".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inv = chol.inverse();
        let precision = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| inv[(i, j)])
            .collect();
        Ok(LogGauss {
            mean: mean.to_vec(),
            precision,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut q = 0.0;
        for i in 0..d {
            let di = x[i] - self.mean[i];
            let row = &self.precision[i * d..(i + 1) * d];
            let mut s = 0.0;
            for j in 0..d {
                s += row[j] * (x[j] - self.mean[j]);
            }
            q += di * s;
        }
        self.log_norm - 0.5 * q
    }
}

/// Tuning for the adaptive quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureOptions {
    /// Stop once successive refinements differ by less than this.
    pub tolerance: f64,
    pub max_refinements: usize,
    /// Half-width of the domain in units of the largest marginal std.
    pub std_span: f64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions {
            tolerance: 1e-6,
            max_refinements: 12,
            std_span: 10.0,
        }
    }
}

struct Entry {
    log_q: f64,
    /// `(component, ln w_{k|entry})`
    comps: Vec<(usize, f64)>,
}

struct Group {
    prob: f64,
    entries: Vec<Entry>,
}

#[derive(Clone, Copy)]
enum Quantity {
    Information,
    BayesAccuracy,
}

struct Partition {
    groups: Vec<Group>,
    comps: Vec<LogGauss>,
}

impl Partition {
    /// Groups label entries by context. Without `by_context` every entry
    /// lands in one group, giving `I(X;Y)` rather than `I(X;Y|C)`.
    fn new(spec: &GmmSpec, by_context: bool) -> Result<Self> {
        spec.validate()?;
        let comps = spec
            .components
            .iter()
            .map(|c| LogGauss::new(&c.mean, &c.covariance_matrix()))
            .collect::<Result<Vec<_>>>()?;
        let probs = spec.label_probs();
        let mut keys: Vec<Vec<String>> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, p) in probs.iter().enumerate() {
            let key = if by_context {
                p.condition.context.clone()
            } else {
                Vec::new()
            };
            match keys.iter().position(|k| *k == key) {
                Some(g) => members[g].push(i),
                None => {
                    keys.push(key);
                    members.push(vec![i]);
                }
            }
        }
        let groups = members
            .into_iter()
            .map(|idx| {
                let z: f64 = idx.iter().map(|&i| probs[i].prob).sum();
                Group {
                    prob: z,
                    entries: idx
                        .into_iter()
                        .map(|i| Entry {
                            log_q: (probs[i].prob / z).ln(),
                            comps: probs[i].weights.iter().map(|&(k, w)| (k, w.ln())).collect(),
                        })
                        .collect(),
                }
            })
            .collect();
        Ok(Partition { groups, comps })
    }

    /// `ln q_e + ln p(x | e)` for every entry of group `g`.
    fn entry_logs(&self, g: &Group, lc: &[f64], buf: &mut Vec<f64>) -> Vec<f64> {
        g.entries
            .iter()
            .map(|e| {
                buf.clear();
                buf.extend(e.comps.iter().map(|&(k, lw)| lw + lc[k]));
                e.log_q + log_sum_exp(buf)
            })
            .collect()
    }

    fn density_integrand(&self, x: &[f64], what: Quantity) -> f64 {
        let lc: Vec<f64> = self.comps.iter().map(|c| c.eval(x)).collect();
        let mut buf = Vec::new();
        let mut total = 0.0;
        for g in &self.groups {
            let t = self.entry_logs(g, &lc, &mut buf);
            total += g.prob
                * match what {
                    Quantity::Information => {
                        let lg = log_sum_exp(&t);
                        t.iter()
                            .zip(&g.entries)
                            .map(|(&te, e)| {
                                let w = te.exp();
                                if w == 0.0 {
                                    0.0
                                } else {
                                    w * (te - e.log_q - lg)
                                }
                            })
                            .sum::<f64>()
                    }
                    Quantity::BayesAccuracy => t.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp(),
                };
        }
        total
    }
}

fn domain(spec: &GmmSpec, span: f64) -> Vec<(f64, f64)> {
    let d = spec.dim();
    let max_std = spec
        .components
        .iter()
        .flat_map(|c| (0..d).map(move |i| c.covariance[i][i].sqrt()))
        .fold(0.0, f64::max);
    (0..d)
        .map(|i| {
            let lo = spec.components.iter().map(|c| c.mean[i]).fold(f64::INFINITY, f64::min);
            let hi = spec
                .components
                .iter()
                .map(|c| c.mean[i])
                .fold(f64::NEG_INFINITY, f64::max);
            (lo - span * max_std, hi + span * max_std)
        })
        .collect()
}

fn trapezoid(part: &Partition, box_: &[(f64, f64)], n: usize, what: Quantity) -> f64 {
    let axis = |i: usize| -> (Vec<f64>, Vec<f64>) {
        let (lo, hi) = box_[i];
        let h = (hi - lo) / n as f64;
        let pts = (0..=n).map(|j| lo + j as f64 * h).collect();
        let w = (0..=n).map(|j| if j == 0 || j == n { h / 2.0 } else { h }).collect();
        (pts, w)
    };
    match box_.len() {
        1 => {
            let (p, w) = axis(0);
            let vals: Vec<f64> = p
                .par_iter()
                .zip(&w)
                .map(|(x, w)| w * part.density_integrand(&[*x], what))
                .collect();
            pairwise_sum(&vals)
        }
        2 => {
            let (p0, w0) = axis(0);
            let (p1, w1) = axis(1);
            let rows: Vec<f64> = p0
                .par_iter()
                .zip(&w0)
                .map(|(x0, wa)| {
                    let row: Vec<f64> = p1
                        .iter()
                        .zip(&w1)
                        .map(|(x1, wb)| wb * part.density_integrand(&[*x0, *x1], what))
                        .collect();
                    wa * pairwise_sum(&row)
                })
                .collect();
            pairwise_sum(&rows)
        }
        _ => unreachable!("quadrature is only used up to two dimensions"),
    }
}

fn integrate(
    spec: &GmmSpec,
    part: &Partition,
    resolution: usize,
    opts: QuadratureOptions,
    what: Quantity,
) -> Result<OracleResult> {
    if spec.dim() > 2 {
        return monte_carlo(part, resolution, what);
    }
    let box_ = domain(spec, opts.std_span);
    let mut n = resolution.max(8);
    let mut prev = trapezoid(part, &box_, n, what);
    for _ in 0..opts.max_refinements {
        n *= 2;
        let next = trapezoid(part, &box_, n, what);
        let diff = (next - prev).abs();
        if diff < opts.tolerance {
            return Ok(OracleResult {
                value: next,
                method: OracleMethod::Quadrature,
                abs_error_bound: diff,
            });
        }
        prev = next;
        if n.pow(spec.dim() as u32) > 1 << 26 {
            break;
        }
    }
    let last = trapezoid(part, &box_, n, what);
    Err(Error::NoConvergence {
        refinements: opts.max_refinements,
        previous: prev,
        last,
    })
}

/// `1000 * resolution` joint draws: entry, then component, then `x`.
fn monte_carlo(part: &Partition, resolution: usize, what: Quantity) -> Result<OracleResult> {
    let n = 1000 * resolution.max(1);
    let mut rng = rng_for(0, 0);
    let weighted = |w: Vec<f64>| WeightedIndex::new(w).map_err(|e| Error::Spec(e.to_string()));
    let group_pick = weighted(part.groups.iter().map(|g| g.prob).collect())?;
    let mut entry_picks = Vec::new();
    for g in &part.groups {
        let ep = weighted(g.entries.iter().map(|e| e.log_q.exp()).collect())?;
        let cps = g
            .entries
            .iter()
            .map(|e| weighted(e.comps.iter().map(|c| c.1.exp()).collect()))
            .collect::<Result<Vec<_>>>()?;
        entry_picks.push((ep, cps));
    }
    let chols: Vec<DMatrix<f64>> = part
        .comps
        .iter()
        .map(|c| {
            let d = c.mean.len();
            DMatrix::from_row_slice(d, d, &c.precision)
                .try_inverse()
                .and_then(|cov| cov.cholesky())
                .map(|ch| ch.l())
                .ok_or_else(|| Error::NotPositiveDefinite("oracle covariance".into()))
        })
        .collect::<Result<_>>()?;
    let mut vals = Vec::with_capacity(n);
    let mut buf = Vec::new();
    for _ in 0..n {
        let gi = group_pick.sample(&mut rng);
        let ei = entry_picks[gi].0.sample(&mut rng);
        let g = &part.groups[gi];
        let k = g.entries[ei].comps[entry_picks[gi].1[ei].sample(&mut rng)].0;
        let c = &part.comps[k];
        let z = standard_normal_vec(&mut rng, c.mean.len());
        let x: Vec<f64> = (0..c.mean.len())
            .map(|i| c.mean[i] + (0..=i).map(|j| chols[k][(i, j)] * z[j]).sum::<f64>())
            .collect();
        let lc: Vec<f64> = part.comps.iter().map(|c| c.eval(&x)).collect();
        let t = part.entry_logs(g, &lc, &mut buf);
        vals.push(match what {
            Quantity::Information => t[ei] - g.entries[ei].log_q - log_sum_exp(&t),
            Quantity::BayesAccuracy => {
                let best = (0..t.len()).fold(0, |b, i| if t[i] > t[b] { i } else { b });
                f64::from(u8::from(best == ei))
            }
        });
    }
    Ok(OracleResult {
        value: pairwise_sum(&vals) / n as f64,
        method: OracleMethod::MonteCarlo,
        abs_error_bound: std_error(&vals),
    })
}

fn no_labels(spec: &GmmSpec) -> Result<Option<OracleResult>> {
    spec.validate()?;
    Ok(spec.condition_map.is_empty().then(|| OracleResult::exact(0.0)))
}

/// `I(X;Y) = E_y KL(p(x|y) || p(x))` with `y` ranging over the condition map.
/// `resolution` is the initial number of grid intervals per axis (or, above
/// two dimensions, thousands of Monte-Carlo draws).
pub fn gmm_mi_numeric(spec: &GmmSpec, resolution: usize) -> Result<OracleResult> {
    gmm_mi_numeric_with(spec, resolution, QuadratureOptions::default())
}

pub fn gmm_mi_numeric_with(spec: &GmmSpec, resolution: usize, opts: QuadratureOptions) -> Result<OracleResult> {
    if let Some(r) = no_labels(spec)? {
        return Ok(r);
    }
    integrate(
        spec,
        &Partition::new(spec, false)?,
        resolution,
        opts,
        Quantity::Information,
    )
}

/// `I(X;Y|C)`: information the label adds once its context is known.
pub fn gmm_cmi_numeric(spec: &GmmSpec, resolution: usize) -> Result<OracleResult> {
    if let Some(r) = no_labels(spec)? {
        return Ok(r);
    }
    integrate(
        spec,
        &Partition::new(spec, true)?,
        resolution,
        QuadratureOptions::default(),
        Quantity::Information,
    )
}

/// `I(X_hi; Y) - I(X_lo; Y)` for the channel outputs at log-SNRs `alpha_lo <
/// alpha_hi`: the part of `I(X;Y)` carried by that log-SNR band, which is what
/// an integral truncated to the band estimates.
pub fn gmm_mi_band(spec: &GmmSpec, alpha_lo: f64, alpha_hi: f64, resolution: usize) -> Result<OracleResult> {
    if !(alpha_lo < alpha_hi) {
        return Err(Error::Config(format!("band [{alpha_lo}, {alpha_hi}] is empty")));
    }
    let hi = gmm_mi_numeric(&spec.corrupted(LogSnr(alpha_hi)), resolution)?;
    let lo = gmm_mi_numeric(&spec.corrupted(LogSnr(alpha_lo)), resolution)?;
    Ok(OracleResult {
        value: hi.value - lo.value,
        method: hi.method,
        abs_error_bound: hi.abs_error_bound + lo.abs_error_bound,
    })
}

/// Accuracy of the Bayes rule that picks the most probable label among those
/// sharing the true label's context.
pub fn gmm_bayes_accuracy(spec: &GmmSpec, resolution: usize) -> Result<OracleResult> {
    if let Some(r) = no_labels(spec)? {
        return Ok(OracleResult { value: 1.0, ..r });
    }
    integrate(
        spec,
        &Partition::new(spec, true)?,
        resolution,
        QuadratureOptions::default(),
        Quantity::BayesAccuracy,
    )
}

/// Most probable label for `x` among the labels of `context`.
pub fn bayes_label(spec: &GmmSpec, x: &[f64], context: &[String]) -> Result<Condition> {
    check_dim("x", spec.dim(), x.len())?;
    let part = Partition::new(spec, true)?;
    let lc: Vec<f64> = part.comps.iter().map(|c| c.eval(x)).collect();
    let probs = spec.label_probs();
    let mut best: Option<(f64, Condition)> = None;
    let mut buf = Vec::new();
    for p in probs.iter().filter(|p| p.condition.context == context) {
        buf.clear();
        buf.extend(p.weights.iter().map(|&(k, w)| w.ln() + lc[k]));
        let score = p.prob.ln() + log_sum_exp(&buf);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, p.condition.clone()));
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| Error::UnknownCondition(format!("context {}", context.join(","))))
}

/// A discretized Gaussian copula: `y` on `bins` equally spaced points of
/// `[-8, 8]` with normal weights, `x | y_k ~ N(rho y_k, 1 - rho^2)`, one label
/// per bin. Its MI approaches [`gaussian_mi`] as the grid is refined.
pub fn gaussian_copula_spec(rho: f64, bins: usize) -> Result<GmmSpec> {
    if !(rho.abs() < 1.0) || bins < 2 {
        return Err(Error::Config("copula needs |rho| < 1 and at least two bins".into()));
    }
    let ys: Vec<f64> = (0..bins).map(|k| -8.0 + 16.0 * k as f64 / (bins - 1) as f64).collect();
    let w: Vec<f64> = ys.iter().map(|y| (-0.5 * y * y).exp()).collect();
    let z: f64 = w.iter().sum();
    let comps = ys
        .iter()
        .zip(&w)
        .map(|(y, w)| crate::denoisers::Component::isotropic(w / z, vec![rho * y], 1.0 - rho * rho))
        .collect();
    GmmSpec::labeled_by_component(comps)
}

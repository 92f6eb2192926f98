//! Information estimators built from denoising errors.
//!
//! All estimators are importance-sampled integrals over log-SNR. With
//! `u = eps_hat(x_alpha)` and `c = eps_hat(x_alpha | y)` evaluated on the same
//! draws `(alpha_i, eps_ij)`:
//!
//! ```text
//! -log p(x)  = d/2 log(2 pi e) - 1/2 ∫ (d sigmoid(alpha) - E|eps - u|^2) dalpha
//! i^s(x;y)   = 1/2 ∫ E[ |eps - u|^2 - |eps - c|^2 ] dalpha
//! i^o(x;y)   = 1/2 ∫ E[ |u - c|^2 ] dalpha
//! ```
//!
//! The NLL form is the log-SNR version of the Gaussian-reference density
//! identity (`mmse_eps = snr * mmse_x`, `dsnr = snr dalpha`). Every integrand
//! is a sum over coordinates, so every report carries a per-dimension split
//! whose entries add up to the total. Conditional variants condition both
//! denoisers on the context.
//!
//! Draws for sample `i` come from stream `i` of the seeded generator, so
//! dataset-level estimates are identical regardless of thread count.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::{Condition, Denoiser, Sample};
use crate::error::{check_dim, Error, Result};
use crate::noise_channel::{corrupt_into, sigmoid, LogSnrSampler, SnrDraw};
use crate::numeric::{pairwise_sum, rng_for, standard_normal_vec, std_error};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Nll,
    Llr,
    PointwiseS,
    PointwiseO,
    Mi,
    Cmi,
}

/// Which pointwise estimator a dataset average is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PointwiseKind {
    /// `i^s`, the log-likelihood ratio.
    Standard,
    /// `i^o`, the orthogonality form.
    #[default]
    Orthogonal,
}

/// An estimate in nats with its Monte-Carlo error and per-coordinate split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub estimator_kind: EstimatorKind,
    pub total: f64,
    pub per_dim: Vec<f64>,
    pub std_error: f64,
    pub n_snr_draws: usize,
    pub n_eps_draws: usize,
    pub n_samples: usize,
    /// Log-SNR interval the integral was restricted to.
    pub interval: (f64, f64),
    /// Set when the integrand blew up; `total` is then `+inf`.
    pub diverged: bool,
}

impl InfoReport {
    fn from_parts(
        kind: EstimatorKind,
        per_dim: Vec<f64>,
        std_error: f64,
        sampler: &LogSnrSampler,
        n_eps: usize,
        n_samples: usize,
    ) -> Self {
        let total = pairwise_sum(&per_dim);
        let mut r = InfoReport {
            estimator_kind: kind,
            total,
            per_dim,
            std_error,
            n_snr_draws: sampler.n_draws(),
            n_eps_draws: n_eps,
            n_samples,
            interval: sampler.interval(),
            diverged: false,
        };
        if !r.total.is_finite() {
            r.diverged = true;
            r.total = f64::INFINITY;
            for v in r.per_dim.iter_mut().filter(|v| !v.is_finite()) {
                *v = f64::INFINITY;
            }
        }
        r
    }

    pub fn dim(&self) -> usize {
        self.per_dim.len()
    }

    /// The same report expressed in bits.
    pub fn to_bits(&self) -> Self {
        let mut r = self.clone();
        r.total /= LN_2;
        r.std_error /= LN_2;
        r.per_dim.iter_mut().for_each(|v| *v /= LN_2);
        r
    }

    /// Sums groups of `channels` consecutive coordinates, e.g. colour channels
    /// stored channel-last per spatial position.
    pub fn per_position(&self, channels: usize) -> Result<Vec<f64>> {
        if channels == 0 || !self.per_dim.len().is_multiple_of(channels) {
            return Err(Error::Config(format!(
                "dimension {} is not a multiple of {channels} channels",
                self.per_dim.len()
            )));
        }
        Ok(self.per_dim.chunks(channels).map(|c| c.iter().sum()).collect())
    }
}

/// One denoiser call site: a denoiser and the condition it receives.
#[derive(Clone, Copy)]
pub struct Term<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub condition: Option<&'a Condition>,
}

impl<'a> Term<'a> {
    pub fn new(denoiser: &'a dyn Denoiser, condition: Option<&'a Condition>) -> Self {
        Term { denoiser, condition }
    }
}

/// Per-draw contributions `w_i * mean_j f(eps_ij)` for one point.
struct DrawSums {
    per_dim: Vec<f64>,
    draw_totals: Vec<f64>,
}

impl DrawSums {
    fn finish(contribs: Vec<Vec<f64>>, dim: usize) -> Self {
        let n = contribs.len();
        let per_dim = (0..dim)
            .map(|j| pairwise_sum(&contribs.iter().map(|c| c[j]).collect::<Vec<_>>()) / n as f64)
            .collect();
        let draw_totals = contribs.iter().map(|c| pairwise_sum(c)).collect();
        DrawSums { per_dim, draw_totals }
    }
}

fn draws_and_noise<R: Rng>(sampler: &LogSnrSampler, rng: &mut R) -> Vec<SnrDraw> {
    sampler.draws(rng)
}

/// `-log p(x)` in nats.
pub fn nll(denoiser: &dyn Denoiser, x: &[f64], sampler: &LogSnrSampler, n_eps: usize, seed: u64) -> Result<InfoReport> {
    nll_stream(Term::new(denoiser, None), x, sampler, n_eps, seed, 0)
}

/// `-log p(x | condition)` in nats.
pub fn conditional_nll(
    denoiser: &dyn Denoiser,
    x: &[f64],
    condition: &Condition,
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
) -> Result<InfoReport> {
    nll_stream(Term::new(denoiser, Some(condition)), x, sampler, n_eps, seed, 0)
}

fn nll_stream(
    term: Term<'_>,
    x: &[f64],
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
    stream: u64,
) -> Result<InfoReport> {
    let d = term.denoiser.dim();
    check_dim("x", d, x.len())?;
    check_eps(n_eps)?;
    let mut rng = rng_for(seed, stream);
    let draws = draws_and_noise(sampler, &mut rng);
    let mut x_alpha = vec![0.0; d];
    let mut contribs = Vec::with_capacity(draws.len());
    for draw in &draws {
        let sig = sigmoid(draw.alpha.0);
        let mut mse = vec![0.0; d];
        for _ in 0..n_eps {
            let eps = standard_normal_vec(&mut rng, d);
            corrupt_into(x, &eps, draw.alpha, &mut x_alpha);
            let e = term.denoiser.predict_eps(&x_alpha, draw.alpha, term.condition)?;
            for j in 0..d {
                mse[j] += (eps[j] - e[j]).powi(2);
            }
        }
        let scale = -0.5 * draw.weight;
        contribs.push(mse.iter().map(|m| scale * (sig - m / n_eps as f64)).collect::<Vec<_>>());
    }
    let sums = DrawSums::finish(contribs, d);
    let base = 0.5 * (2.0 * PI * std::f64::consts::E).ln();
    let per_dim = sums.per_dim.iter().map(|v| base + v).collect();
    Ok(InfoReport::from_parts(
        EstimatorKind::Nll,
        per_dim,
        std_error(&sums.draw_totals),
        sampler,
        n_eps,
        1,
    ))
}

fn check_eps(n_eps: usize) -> Result<()> {
    if n_eps == 0 {
        Err(Error::Config("n_eps must be positive".into()))
    } else {
        Ok(())
    }
}

/// The three coupled pointwise quantities from a single set of draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseSet {
    /// `i^s`
    pub standard: InfoReport,
    /// `i^o`
    pub orthogonal: InfoReport,
    /// `1/2 ∫ E[(u - c) · (c - eps)]`; `i^s = i^o + 2 * cross`.
    pub cross: InfoReport,
}

/// Evaluates `i^s`, `i^o` and the cross term with shared `(alpha, eps)` draws.
/// `reference` plays the role of `p(x)` (or `p(x | c)`), `informed` of
/// `p(x | y)` (or `p(x | y, c)`).
pub fn pointwise_terms(
    reference: Term<'_>,
    informed: Term<'_>,
    x: &[f64],
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
    stream: u64,
) -> Result<PointwiseSet> {
    let d = reference.denoiser.dim();
    check_dim("informed denoiser", d, informed.denoiser.dim())?;
    check_dim("x", d, x.len())?;
    check_eps(n_eps)?;
    let mut rng = rng_for(seed, stream);
    let draws = draws_and_noise(sampler, &mut rng);
    let mut x_alpha = vec![0.0; d];
    let (mut cs, mut co, mut cx) = (
        Vec::with_capacity(draws.len()),
        Vec::with_capacity(draws.len()),
        Vec::with_capacity(draws.len()),
    );
    for draw in &draws {
        let (mut s, mut o, mut c) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        for _ in 0..n_eps {
            let eps = standard_normal_vec(&mut rng, d);
            corrupt_into(x, &eps, draw.alpha, &mut x_alpha);
            let u = reference
                .denoiser
                .predict_eps(&x_alpha, draw.alpha, reference.condition)?;
            let v = informed
                .denoiser
                .predict_eps(&x_alpha, draw.alpha, informed.condition)?;
            for j in 0..d {
                let diff = u[j] - v[j];
                s[j] += (eps[j] - u[j]).powi(2) - (eps[j] - v[j]).powi(2);
                o[j] += diff * diff;
                c[j] += diff * (v[j] - eps[j]);
            }
        }
        let scale = 0.5 * draw.weight / n_eps as f64;
        cs.push(s.iter().map(|v| scale * v).collect::<Vec<_>>());
        co.push(o.iter().map(|v| scale * v).collect::<Vec<_>>());
        cx.push(c.iter().map(|v| scale * v).collect::<Vec<_>>());
    }
    let mk = |kind, contribs: Vec<Vec<f64>>| {
        let sums = DrawSums::finish(contribs, d);
        InfoReport::from_parts(kind, sums.per_dim, std_error(&sums.draw_totals), sampler, n_eps, 1)
    };
    Ok(PointwiseSet {
        standard: mk(EstimatorKind::PointwiseS, cs),
        orthogonal: mk(EstimatorKind::PointwiseO, co),
        cross: mk(EstimatorKind::PointwiseS, cx),
    })
}

/// `i^s(x; y) = log p(x|y) - log p(x)`; may be negative.
pub fn pointwise_s(
    uncond: &dyn Denoiser,
    cond: &dyn Denoiser,
    x: &[f64],
    y: &Condition,
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
) -> Result<InfoReport> {
    Ok(pointwise_terms(
        Term::new(uncond, None),
        Term::new(cond, Some(y)),
        x,
        sampler,
        n_eps,
        seed,
        0,
    )?
    .standard)
}

/// Log-likelihood ratio; the same integral as [`pointwise_s`].
pub fn llr(
    uncond: &dyn Denoiser,
    cond: &dyn Denoiser,
    x: &[f64],
    y: &Condition,
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
) -> Result<InfoReport> {
    let mut r = pointwise_s(uncond, cond, x, y, sampler, n_eps, seed)?;
    r.estimator_kind = EstimatorKind::Llr;
    Ok(r)
}

/// `i^o(x; y)`; non-negative by construction.
pub fn pointwise_o(
    uncond: &dyn Denoiser,
    cond: &dyn Denoiser,
    x: &[f64],
    y: &Condition,
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
) -> Result<InfoReport> {
    Ok(pointwise_terms(
        Term::new(uncond, None),
        Term::new(cond, Some(y)),
        x,
        sampler,
        n_eps,
        seed,
        0,
    )?
    .orthogonal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    pub report: InfoReport,
}

/// Dataset average plus the per-sample reports it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub aggregate: InfoReport,
    pub samples: Vec<SampleReport>,
}

/// Dataset averages of all three coupled pointwise quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSet {
    pub standard: DatasetReport,
    pub orthogonal: DatasetReport,
    pub cross: DatasetReport,
}

fn aggregate(
    kind: EstimatorKind,
    reports: &[&InfoReport],
    sampler: &LogSnrSampler,
    n_eps: usize,
) -> Result<InfoReport> {
    let first = reports.first().ok_or(Error::EmptyDataset)?;
    let d = first.dim();
    let n = reports.len() as f64;
    let per_dim = (0..d)
        .map(|j| pairwise_sum(&reports.iter().map(|r| r.per_dim[j]).collect::<Vec<_>>()) / n)
        .collect();
    let totals: Vec<f64> = reports.iter().map(|r| r.total).collect();
    // Spread across samples already contains each sample's MC noise.
    let se = if reports.len() > 1 {
        std_error(&totals)
    } else {
        first.std_error
    };
    Ok(InfoReport::from_parts(kind, per_dim, se, sampler, n_eps, reports.len()))
}

fn dataset_report(
    kind: EstimatorKind,
    ids: &[String],
    reports: Vec<InfoReport>,
    sampler: &LogSnrSampler,
    n_eps: usize,
) -> Result<DatasetReport> {
    let refs: Vec<&InfoReport> = reports.iter().collect();
    let agg = aggregate(kind, &refs, sampler, n_eps)?;
    Ok(DatasetReport {
        aggregate: agg,
        samples: ids
            .iter()
            .cloned()
            .zip(reports)
            .map(|(id, report)| SampleReport { id, report })
            .collect(),
    })
}

fn sample_ids(dataset: &[Sample]) -> Vec<String> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, s)| if s.id.is_empty() { format!("s{i}") } else { s.id.clone() })
        .collect()
}

/// Average NLL over a dataset. With `conditional`, each sample's own
/// condition is given to the denoiser (`-log p(x | y)`).
pub fn nll_dataset(
    denoiser: &dyn Denoiser,
    dataset: &[Sample],
    conditional: bool,
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
) -> Result<DatasetReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reports = dataset
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cond = if conditional { s.condition.as_ref() } else { None };
            nll_stream(Term::new(denoiser, cond), &s.x, sampler, n_eps, seed, i as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    dataset_report(EstimatorKind::Nll, &sample_ids(dataset), reports, sampler, n_eps)
}

fn label_condition(s: &Sample) -> Result<&Condition> {
    match &s.condition {
        Some(c) if c.label.is_some() => Ok(c),
        _ => Err(Error::Config(format!("sample {} carries no label condition", s.id))),
    }
}

/// Coupled `i^s`, `i^o`, cross term for every sample, with `reference` built
/// by `make_reference(condition)`.
fn dataset_terms<'a>(
    reference: &'a dyn Denoiser,
    informed: &'a dyn Denoiser,
    dataset: &'a [Sample],
    context_only: bool,
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
) -> Result<DatasetSet> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sets = dataset
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let y = label_condition(s)?;
            let ctx = y.without_label();
            let reference_cond = if context_only && !ctx.is_unconditional() {
                Some(&ctx)
            } else {
                None
            };
            pointwise_terms(
                Term::new(reference, reference_cond),
                Term::new(informed, Some(y)),
                &s.x,
                sampler,
                n_eps,
                seed,
                i as u64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let ids = sample_ids(dataset);
    let (kind_s, kind_o) = if context_only {
        (EstimatorKind::Cmi, EstimatorKind::Cmi)
    } else {
        (EstimatorKind::Mi, EstimatorKind::Mi)
    };
    let mut standard = Vec::with_capacity(sets.len());
    let mut orthogonal = Vec::with_capacity(sets.len());
    let mut cross = Vec::with_capacity(sets.len());
    for s in sets {
        standard.push(s.standard);
        orthogonal.push(s.orthogonal);
        cross.push(s.cross);
    }
    Ok(DatasetSet {
        standard: dataset_report(kind_s, &ids, standard, sampler, n_eps)?,
        orthogonal: dataset_report(kind_o, &ids, orthogonal, sampler, n_eps)?,
        cross: dataset_report(kind_s, &ids, cross, sampler, n_eps)?,
    })
}

/// `I(X;Y)` and its pointwise pieces from both estimators on shared draws.
pub fn mi_terms(
    uncond: &dyn Denoiser,
    cond: &dyn Denoiser,
    dataset: &[Sample],
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
) -> Result<DatasetSet> {
    dataset_terms(uncond, cond, dataset, false, sampler, n_eps, seed)
}

/// `I(X;Y) = E[i(x;y)]` over `dataset`, whose samples must carry labels.
pub fn mi(
    uncond: &dyn Denoiser,
    cond: &dyn Denoiser,
    dataset: &[Sample],
    kind: PointwiseKind,
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
) -> Result<DatasetReport> {
    let set = mi_terms(uncond, cond, dataset, sampler, n_eps, seed)?;
    Ok(match kind {
        PointwiseKind::Standard => set.standard,
        PointwiseKind::Orthogonal => set.orthogonal,
    })
}

/// `I(X;Y|C)` and its pointwise pieces on shared draws.
pub fn cmi_terms(
    denoiser_full: &dyn Denoiser,
    denoiser_ctx: &dyn Denoiser,
    dataset: &[Sample],
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
) -> Result<DatasetSet> {
    dataset_terms(denoiser_ctx, denoiser_full, dataset, true, sampler, n_eps, seed)
}

/// `I(X;Y|C) = E[i(x;y|c)]`: `denoiser_full` sees `(y, c)`, `denoiser_ctx`
/// sees `c` alone (the sample's condition with the label removed).
pub fn cmi(
    denoiser_full: &dyn Denoiser,
    denoiser_ctx: &dyn Denoiser,
    dataset: &[Sample],
    kind: PointwiseKind,
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
) -> Result<DatasetReport> {
    let set = cmi_terms(denoiser_full, denoiser_ctx, dataset, sampler, n_eps, seed)?;
    Ok(match kind {
        PointwiseKind::Standard => set.standard,
        PointwiseKind::Orthogonal => set.orthogonal,
    })
}

/// Pointwise `i(x; y | c)` for a single sample.
pub fn pointwise_conditional(
    denoiser_full: &dyn Denoiser,
    denoiser_ctx: &dyn Denoiser,
    x: &[f64],
    y: &Condition,
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
) -> Result<PointwiseSet> {
    let ctx = y.without_label();
    let reference_cond = if ctx.is_unconditional() { None } else { Some(&ctx) };
    pointwise_terms(
        Term::new(denoiser_ctx, reference_cond),
        Term::new(denoiser_full, Some(y)),
        x,
        sampler,
        n_eps,
        seed,
        0,
    )
}

//! Gaussian-mixture sources and their exact MMSE noise predictors.
//!
//! A [`GmmSpec`] describes `p(x)` as a mixture and, through its condition map,
//! a joint `p(x, y, c)`: every entry names a `(label, context)` pair, the subset
//! of components it generates from, and a probability `p(y, c)`. Within an entry
//! the component weights are the global weights renormalized over the subset.
//! Conditioning on context alone marginalizes over the entries sharing it.
//!
//! The optimal denoiser for a mixture is the responsibility-weighted average of
//! the per-component closed forms, with responsibilities evaluated under the
//! corrupted marginal in the log domain.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gaussian::{validate_covariance, GaussianComponent};
use super::{Condition, Denoiser, Sample};
use crate::error::{check_dim, Error, Result};
use crate::noise_channel::LogSnr;
use crate::numeric::{log_sum_exp, standard_normal_vec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major covariance matrix.
    pub covariance: Vec<Vec<f64>>,
}

impl Component {
    pub fn isotropic(weight: f64, mean: Vec<f64>, variance: f64) -> Self {
        let d = mean.len();
        Component {
            weight,
            mean,
            covariance: diag(&vec![variance; d]),
        }
    }

    pub fn diagonal(weight: f64, mean: Vec<f64>, variances: &[f64]) -> Self {
        Component {
            weight,
            mean,
            covariance: diag(variances),
        }
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let d = self.covariance.len();
        DMatrix::from_fn(d, d, |i, j| self.covariance[i].get(j).copied().unwrap_or(f64::NAN))
    }
}

fn diag(v: &[f64]) -> Vec<Vec<f64>> {
    let d = v.len();
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { v[i] } else { 0.0 }).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionEntry {
    pub label: String,
    #[serde(default)]
    pub context: Vec<String>,
    pub components: Vec<usize>,
    /// Joint probability of this `(label, context)`; defaults to the entry's
    /// share of component mass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
}

impl ConditionEntry {
    pub fn new(label: impl Into<String>, components: Vec<usize>) -> Self {
        ConditionEntry {
            label: label.into(),
            context: Vec::new(),
            components,
            prob: None,
        }
    }

    pub fn in_context<S: Into<String>>(mut self, context: impl IntoIterator<Item = S>) -> Self {
        self.context = context.into_iter().map(Into::into).collect();
        self
    }

    pub fn condition(&self) -> Condition {
        Condition::with_context(self.label.clone(), self.context.iter().cloned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub components: Vec<Component>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub condition_map: Vec<ConditionEntry>,
}

/// A resolved condition-map entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelProb {
    pub condition: Condition,
    pub prob: f64,
    /// `(component index, p(k | y, c))`.
    pub weights: Vec<(usize, f64)>,
}

impl GmmSpec {
    pub fn new(components: Vec<Component>, condition_map: Vec<ConditionEntry>) -> Result<Self> {
        let spec = GmmSpec {
            components,
            condition_map,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// One standard-normal-like component `N(mean, variance I)`.
    pub fn single(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![Component::isotropic(1.0, mean, variance)], Vec::new())
    }

    /// Labels `y_k` that each select exactly component `k`.
    pub fn labeled_by_component(components: Vec<Component>) -> Result<Self> {
        let map = (0..components.len())
            .map(|k| ConditionEntry::new(format!("y{k}"), vec![k]))
            .collect();
        Self::new(components, map)
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Spec("mixture has no components".into()));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::Spec("mixture dimension is zero".into()));
        }
        let mut total = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::Spec(format!("component {k} weight {} outside (0, 1]", c.weight)));
            }
            total += c.weight;
            check_dim("component mean", d, c.mean.len())?;
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Spec(format!("component {k} mean is not finite")));
            }
            check_dim("covariance rows", d, c.covariance.len())?;
            for row in &c.covariance {
                check_dim("covariance row", d, row.len())?;
            }
            validate_covariance(&c.covariance_matrix(), &format!("component {k}"))?;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Spec(format!("component weights sum to {total}, not 1")));
        }

        let mut seen = std::collections::HashSet::new();
        for e in &self.condition_map {
            if e.components.is_empty() {
                return Err(Error::Spec(format!("condition {} selects no components", e.label)));
            }
            if let Some(&bad) = e.components.iter().find(|&&k| k >= self.components.len()) {
                return Err(Error::Spec(format!("condition {} references component {bad}", e.label)));
            }
            if !seen.insert(e.condition()) {
                return Err(Error::Spec(format!("duplicate condition {}", e.condition())));
            }
        }
        let provided = self.condition_map.iter().filter(|e| e.prob.is_some()).count();
        if provided != 0 && provided != self.condition_map.len() {
            return Err(Error::Spec(
                "condition probabilities must be given for all entries or none".into(),
            ));
        }
        if !self.condition_map.is_empty() {
            let probs = self.label_probs();
            if provided != 0 {
                let s: f64 = probs.iter().map(|p| p.prob).sum();
                if (s - 1.0).abs() > 1e-9 || probs.iter().any(|p| p.prob < 0.0) {
                    return Err(Error::Spec(format!("condition probabilities sum to {s}, not 1")));
                }
            }
            // The joint must marginalize back to the mixture weights.
            let mut implied = vec![0.0; self.components.len()];
            for p in &probs {
                for &(k, w) in &p.weights {
                    implied[k] += p.prob * w;
                }
            }
            for (k, (got, c)) in implied.iter().zip(&self.components).enumerate() {
                if (got - c.weight).abs() > 1e-6 {
                    return Err(Error::Spec(format!(
                        "condition map implies weight {got} for component {k}, mixture has {}",
                        c.weight
                    )));
                }
            }
        }
        Ok(())
    }

    /// Entries resolved to probabilities and renormalized component weights.
    pub fn label_probs(&self) -> Vec<LabelProb> {
        let masses: Vec<f64> = self
            .condition_map
            .iter()
            .map(|e| e.components.iter().map(|&k| self.components[k].weight).sum())
            .collect();
        let mass_total: f64 = masses.iter().sum();
        self.condition_map
            .iter()
            .zip(&masses)
            .map(|(e, &mass)| LabelProb {
                condition: e.condition(),
                prob: e.prob.unwrap_or(mass / mass_total),
                weights: e
                    .components
                    .iter()
                    .map(|&k| (k, self.components[k].weight / mass))
                    .collect(),
            })
            .collect()
    }

    /// Entries grouped by (normalized) context.
    pub fn context_groups(&self) -> BTreeMap<Vec<String>, Vec<LabelProb>> {
        let mut groups: BTreeMap<Vec<String>, Vec<LabelProb>> = BTreeMap::new();
        for p in self.label_probs() {
            groups.entry(p.condition.context.clone()).or_default().push(p);
        }
        groups
    }

    /// Component weights of `p(x | condition)`.
    pub fn conditional_weights(&self, condition: Option<&Condition>) -> Result<Vec<(usize, f64)>> {
        let cond = match condition {
            None => return Ok(self.unconditional_weights()),
            Some(c) if c.is_unconditional() => return Ok(self.unconditional_weights()),
            Some(c) => c.clone().normalized(),
        };
        let probs = self.label_probs();
        if cond.label.is_some() {
            return probs
                .into_iter()
                .find(|p| p.condition == cond)
                .map(|p| p.weights)
                .ok_or_else(|| Error::UnknownCondition(cond.to_string()));
        }
        let matching: Vec<&LabelProb> = probs.iter().filter(|p| p.condition.context == cond.context).collect();
        if matching.is_empty() {
            return Err(Error::UnknownCondition(cond.to_string()));
        }
        let z: f64 = matching.iter().map(|p| p.prob).sum();
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for p in matching {
            for &(k, w) in &p.weights {
                *acc.entry(k).or_default() += p.prob * w / z;
            }
        }
        Ok(acc.into_iter().collect())
    }

    fn unconditional_weights(&self) -> Vec<(usize, f64)> {
        self.components.iter().enumerate().map(|(k, c)| (k, c.weight)).collect()
    }

    /// The mixture seen through the channel at `alpha`: means scaled by `a`,
    /// covariances `a^2 Sigma + b^2 I`. Condition map unchanged.
    pub fn corrupted(&self, alpha: LogSnr) -> GmmSpec {
        let (a, b) = alpha.scales();
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.iter().map(|m| a * m).collect(),
                covariance: c
                    .covariance
                    .iter()
                    .enumerate()
                    .map(|(i, row)| {
                        row.iter()
                            .enumerate()
                            .map(|(j, v)| a * a * v + if i == j { b * b } else { 0.0 })
                            .collect()
                    })
                    .collect(),
            })
            .collect();
        GmmSpec {
            components,
            condition_map: self.condition_map.clone(),
        }
    }

    /// Draws `n` labeled samples. With a condition map, an entry is drawn by its
    /// probability and a component from its renormalized weights; otherwise the
    /// samples carry no condition.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Sample>> {
        let chol: Vec<DMatrix<f64>> = self
            .components
            .iter()
            .map(|c| {
                c.covariance_matrix()
                    .cholesky()
                    .map(|ch| ch.l())
                    .ok_or_else(|| Error::NotPositiveDefinite("component".into()))
            })
            .collect::<Result<_>>()?;
        let draw_x = |k: usize, rng: &mut R| -> Vec<f64> {
            let z = standard_normal_vec(rng, self.dim());
            let l = &chol[k];
            let m = &self.components[k].mean;
            (0..self.dim())
                .map(|i| m[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
                .collect()
        };
        let weighted = |w: &[f64]| WeightedIndex::new(w).map_err(|e| Error::Spec(e.to_string()));

        let mut out = Vec::with_capacity(n);
        if self.condition_map.is_empty() {
            let w: Vec<f64> = self.components.iter().map(|c| c.weight).collect();
            let pick = weighted(&w)?;
            for i in 0..n {
                let k = pick.sample(rng);
                out.push(Sample::new(format!("s{i}"), draw_x(k, rng), None));
            }
        } else {
            let probs = self.label_probs();
            let entry_pick = weighted(&probs.iter().map(|p| p.prob).collect::<Vec<_>>())?;
            let comp_picks: Vec<WeightedIndex<f64>> = probs
                .iter()
                .map(|p| weighted(&p.weights.iter().map(|w| w.1).collect::<Vec<_>>()))
                .collect::<Result<_>>()?;
            for i in 0..n {
                let e = entry_pick.sample(rng);
                let k = probs[e].weights[comp_picks[e].sample(rng)].0;
                out.push(Sample::new(
                    format!("s{i}"),
                    draw_x(k, rng),
                    Some(probs[e].condition.clone()),
                ));
            }
        }
        Ok(out)
    }
}

/// `(component index, posterior weight)` pairs.
type Responsibilities = Vec<(usize, f64)>;

/// Exact MMSE noise predictor for a Gaussian-mixture source.
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    spec: GmmSpec,
    components: Vec<GaussianComponent>,
    unconditional: Vec<(usize, f64)>,
    /// Precomputed `(component, ln weight)` lists per condition.
    tables: HashMap<Condition, Vec<(usize, f64)>>,
}

fn log_table(weights: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    weights
        .into_iter()
        .filter(|w| w.1 > 0.0)
        .map(|(k, w)| (k, w.ln()))
        .collect()
}

impl GmmDenoiser {
    pub fn new(spec: GmmSpec) -> Result<Self> {
        spec.validate()?;
        let components = spec
            .components
            .iter()
            .map(|c| GaussianComponent::new(c.mean.clone(), &c.covariance_matrix()))
            .collect::<Result<Vec<_>>>()?;
        let unconditional = log_table(spec.conditional_weights(None)?);
        let mut tables = HashMap::new();
        for p in spec.label_probs() {
            let ctx = p.condition.without_label();
            if !tables.contains_key(&ctx) && !ctx.is_unconditional() {
                tables.insert(ctx.clone(), log_table(spec.conditional_weights(Some(&ctx))?));
            }
            tables.insert(p.condition, log_table(p.weights));
        }
        Ok(GmmDenoiser {
            spec,
            components,
            unconditional,
            tables,
        })
    }

    pub fn spec(&self) -> &GmmSpec {
        &self.spec
    }

    fn table(&self, condition: Option<&Condition>) -> Result<std::borrow::Cow<'_, [(usize, f64)]>> {
        match condition {
            None => Ok(self.unconditional.as_slice().into()),
            Some(c) if c.is_unconditional() => Ok(self.unconditional.as_slice().into()),
            Some(c) => match self.tables.get(c) {
                Some(t) => Ok(t.as_slice().into()),
                None => Ok(log_table(self.spec.conditional_weights(Some(c))?).into()),
            },
        }
    }

    fn evaluate(
        &self,
        x_alpha: &[f64],
        alpha: LogSnr,
        condition: Option<&Condition>,
    ) -> Result<(Responsibilities, Vec<Vec<f64>>)> {
        check_dim("x_alpha", self.spec.dim(), x_alpha.len())?;
        let table = self.table(condition)?;
        let mut log_post = Vec::with_capacity(table.len());
        let mut eps = Vec::with_capacity(table.len());
        for &(k, lw) in table.iter() {
            let ev = self.components[k].evaluate(x_alpha, alpha, None);
            log_post.push(lw + ev.log_density);
            eps.push(ev.eps_hat);
        }
        let lse = log_sum_exp(&log_post);
        let resp = table
            .iter()
            .zip(&log_post)
            .map(|(&(k, _), lp)| (k, if lse.is_finite() { (lp - lse).exp() } else { 0.0 }))
            .collect();
        Ok((resp, eps))
    }

    /// Posterior responsibilities `p(k | x_alpha, condition)`.
    pub fn responsibilities(
        &self,
        x_alpha: &[f64],
        alpha: LogSnr,
        condition: Option<&Condition>,
    ) -> Result<Vec<(usize, f64)>> {
        Ok(self.evaluate(x_alpha, alpha, condition)?.0)
    }
}

impl Denoiser for GmmDenoiser {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn predict_eps(&self, x_alpha: &[f64], alpha: LogSnr, condition: Option<&Condition>) -> Result<Vec<f64>> {
        let (resp, eps) = self.evaluate(x_alpha, alpha, condition)?;
        let mut out = vec![0.0; x_alpha.len()];
        for ((_, r), e) in resp.iter().zip(&eps) {
            for (o, v) in out.iter_mut().zip(e) {
                *o += r * v;
            }
        }
        Ok(out)
    }
}

/// Closed-form denoiser for a single Gaussian source.
pub fn gaussian_mmse(spec: GmmSpec) -> Result<GmmDenoiser> {
    if spec.n_components() != 1 {
        return Err(Error::Spec(format!(
            "gaussian_mmse needs exactly one component, got {}",
            spec.n_components()
        )));
    }
    GmmDenoiser::new(spec)
}

/// Closed-form denoiser for a Gaussian-mixture source.
pub fn gmm_mmse(spec: GmmSpec) -> Result<GmmDenoiser> {
    GmmDenoiser::new(spec)
}

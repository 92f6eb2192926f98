//! Toy-scale versions of three uses of pointwise information: picking the
//! condition that best explains a point, turning per-coordinate information
//! into a segmentation, and relating information to the effect of editing a
//! condition along the flow.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::{Component, Condition, ConditionEntry, Denoiser, GmmSpec, Sample};
use crate::error::{check_dim, Error, Result};
use crate::flow_ode::{decode, encode, SolverConfig};
use crate::info_estimators::{pointwise_terms, PointwiseKind, Term};
use crate::noise_channel::LogSnrSampler;
use crate::numeric::{mean, percentile, rng_for};

/// Everything needed to score a condition against a point.
#[derive(Clone, Copy)]
pub struct ScoreAssets<'a> {
    pub uncond: &'a dyn Denoiser,
    pub cond: &'a dyn Denoiser,
    pub sampler: &'a LogSnrSampler,
    pub n_eps: usize,
    pub seed: u64,
    /// `Orthogonal` scores with `i^o`, `Standard` with `i^s`.
    pub score: PointwiseKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub chosen: usize,
    pub chosen_condition: Condition,
    pub scores: Vec<f64>,
    /// Another candidate reached the maximal score; the first one was chosen.
    pub tie: bool,
}

/// Scores every candidate with the same `(alpha, eps)` draws (stream
/// `stream`) and returns the argmax.
pub fn rank_conditions(x: &[f64], candidates: &[Condition], assets: &ScoreAssets<'_>, stream: u64) -> Result<Ranking> {
    if candidates.len() < 2 {
        return Err(Error::Config("ranking needs at least two candidates".into()));
    }
    let scores = candidates
        .iter()
        .map(|c| {
            let set = pointwise_terms(
                Term::new(assets.uncond, None),
                Term::new(assets.cond, Some(c)),
                x,
                assets.sampler,
                assets.n_eps,
                assets.seed,
                stream,
            )?;
            Ok(match assets.score {
                PointwiseKind::Orthogonal => set.orthogonal.total,
                PointwiseKind::Standard => set.standard.total,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pick(candidates, scores))
}

fn pick(candidates: &[Condition], scores: Vec<f64>) -> Ranking {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let tie = scores.iter().enumerate().any(|(i, s)| i != best && *s == scores[best]);
    Ranking {
        chosen: best,
        chosen_condition: candidates[best].clone(),
        scores,
        tie,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingItem {
    #[serde(default)]
    pub id: String,
    pub x: Vec<f64>,
    pub truth: Condition,
    pub distractors: Vec<Condition>,
    /// Free-form category used for the per-relation breakdown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

impl RankingItem {
    pub fn validate(&self) -> Result<()> {
        if self.distractors.is_empty() {
            return Err(Error::Config(format!("item {} has no distractors", self.id)));
        }
        if self.distractors.contains(&self.truth) {
            return Err(Error::Config(format!(
                "item {} lists its true condition as a distractor",
                self.id
            )));
        }
        Ok(())
    }

    /// Truth first, then distractors.
    pub fn candidates(&self) -> Vec<Condition> {
        std::iter::once(self.truth.clone())
            .chain(self.distractors.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOutcome {
    pub id: String,
    pub relation: Option<String>,
    pub chosen: Condition,
    pub correct: bool,
    pub tie: bool,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub accuracy: f64,
    pub n: usize,
    pub n_ties: usize,
    pub by_relation: BTreeMap<String, f64>,
    pub outcomes: Vec<RankOutcome>,
}

/// Ranks every item (item `i` uses stream `i`). A tie counts as correct only
/// if the truth, which is listed first, was chosen.
pub fn evaluate_ranking(items: &[RankingItem], assets: &ScoreAssets<'_>) -> Result<RankingReport> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for it in items {
        it.validate()?;
    }
    let outcomes = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let r = rank_conditions(&it.x, &it.candidates(), assets, i as u64)?;
            Ok(RankOutcome {
                id: it.id.clone(),
                relation: it.relation.clone(),
                correct: r.chosen == 0,
                chosen: r.chosen_condition,
                tie: r.tie,
                scores: r.scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let acc = |o: &[&RankOutcome]| o.iter().filter(|o| o.correct).count() as f64 / o.len() as f64;
    let mut groups: BTreeMap<String, Vec<&RankOutcome>> = BTreeMap::new();
    for o in &outcomes {
        if let Some(r) = &o.relation {
            groups.entry(r.clone()).or_default().push(o);
        }
    }
    Ok(RankingReport {
        accuracy: acc(&outcomes.iter().collect::<Vec<_>>()),
        n: outcomes.len(),
        n_ties: outcomes.iter().filter(|o| o.tie).count(),
        by_relation: groups.iter().map(|(k, v)| (k.clone(), acc(v))).collect(),
        outcomes,
    })
}

/// Items drawn from `spec`; distractors are the other labels sharing the
/// sample's context. Draws whose context admits a single label are skipped,
/// so fewer than `n` items may come back.
pub fn ranking_items_from_gmm<R: Rng + ?Sized>(
    spec: &GmmSpec,
    n: usize,
    relation: Option<&str>,
    rng: &mut R,
) -> Result<Vec<RankingItem>> {
    let groups = spec.context_groups();
    spec.sample(n, rng)?
        .into_iter()
        .filter(|s| s.condition.as_ref().is_none_or(|c| groups[&c.context].len() > 1))
        .map(|s| {
            let truth = s
                .condition
                .ok_or_else(|| Error::Spec("ranking needs a condition map".into()))?;
            let distractors: Vec<Condition> = groups[&truth.context]
                .iter()
                .map(|p| p.condition.clone())
                .filter(|c| *c != truth)
                .collect();
            Ok(RankingItem {
                id: s.id,
                x: s.x,
                truth,
                distractors,
                relation: relation.map(str::to_string),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapEval {
    pub heatmap: Vec<f64>,
    pub truth_mask: Vec<bool>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub threshold: f64,
    pub mask: Vec<bool>,
    pub iou: f64,
}

/// Min-max rescaling to `[0, 1]`; a constant map rescales to all ones.
pub fn rescale(heatmap: &[f64]) -> Vec<f64> {
    let lo = heatmap.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = heatmap.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        heatmap.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; heatmap.len()]
    }
}

/// Intersection over union; two empty masks agree perfectly (1), an empty
/// union against a non-empty one cannot occur.
pub fn iou(mask: &[bool], truth: &[bool]) -> f64 {
    let inter = mask.iter().zip(truth).filter(|(a, b)| **a && **b).count();
    let union = mask.iter().zip(truth).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_heatmap(heatmap: &[f64], truth: &[bool]) -> Result<()> {
    check_dim("truth mask", heatmap.len(), truth.len())?;
    if heatmap.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if heatmap.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Config("heatmap entries must be finite and non-negative".into()));
    }
    Ok(())
}

/// Thresholds the rescaled heatmap at `eval.threshold`.
pub fn segment_from_heatmap(eval: &HeatmapEval) -> Result<Segmentation> {
    check_heatmap(&eval.heatmap, &eval.truth_mask)?;
    if !(0.0..=1.0).contains(&eval.threshold) {
        return Err(Error::Config(format!("threshold {} outside [0, 1]", eval.threshold)));
    }
    Ok(threshold_at(&rescale(&eval.heatmap), &eval.truth_mask, eval.threshold))
}

fn threshold_at(scaled: &[f64], truth: &[bool], t: f64) -> Segmentation {
    let mask: Vec<bool> = scaled.iter().map(|v| *v >= t).collect();
    Segmentation {
        threshold: t,
        iou: iou(&mask, truth),
        mask,
    }
}

/// Best IoU over thresholds `0.00, 0.01, ..., 1.00` (lowest threshold wins ties).
pub fn sweep_threshold(heatmap: &[f64], truth: &[bool]) -> Result<Segmentation> {
    check_heatmap(heatmap, truth)?;
    let scaled = rescale(heatmap);
    let mut best: Option<Segmentation> = None;
    for k in 0..=100 {
        let s = threshold_at(&scaled, truth, k as f64 / 100.0);
        if best.as_ref().is_none_or(|b| s.iou > b.iou) {
            best = Some(s);
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Pearson correlation; errors name the side with zero variance.
pub fn intervention_correlation(scores: &[f64], deltas: &[f64]) -> Result<f64> {
    check_dim("deltas", scores.len(), deltas.len())?;
    if scores.len() < 3 {
        return Err(Error::Config("correlation needs at least three pairs".into()));
    }
    let (ms, md) = (mean(scores), mean(deltas));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (s, d) in scores.iter().zip(deltas) {
        sxy += (s - ms) * (d - md);
        sxx += (s - ms) * (s - ms);
        syy += (d - md) * (d - md);
    }
    if sxx == 0.0 {
        return Err(Error::Degenerate("scores have zero variance".into()));
    }
    if syy == 0.0 {
        return Err(Error::Degenerate("deltas have zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimCorrelation {
    pub mean_r: f64,
    pub n_used: usize,
    /// Samples whose per-dimension scores or deltas were constant.
    pub n_skipped: usize,
}

/// Per-sample correlation between per-dimension scores and deltas, averaged
/// over samples.
pub fn per_dim_correlation(scores: &[Vec<f64>], deltas: &[Vec<f64>]) -> Result<DimCorrelation> {
    check_dim("delta maps", scores.len(), deltas.len())?;
    let mut rs = Vec::new();
    let mut skipped = 0;
    for (s, d) in scores.iter().zip(deltas) {
        match intervention_correlation(s, d) {
            Ok(r) => rs.push(r),
            Err(Error::Degenerate(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if rs.is_empty() {
        return Err(Error::Degenerate(
            "every sample has a constant score or delta map".into(),
        ));
    }
    Ok(DimCorrelation {
        mean_r: mean(&rs),
        n_used: rs.len(),
        n_skipped: skipped,
    })
}

/// One-sided permutation p-value for a correlation at least as large as the
/// observed one: `(1 + #{r_perm >= r}) / (1 + n_perm)`.
pub fn permutation_p_value(scores: &[f64], deltas: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    let observed = intervention_correlation(scores, deltas)?;
    let mut rng = rng_for(seed, 0);
    let mut shuffled = deltas.to_vec();
    let mut hits = 0;
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        if intervention_correlation(scores, &shuffled)? >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + n_perm) as f64)
}

/// 95% Fisher-z interval for a Pearson correlation over `n` pairs.
pub fn pearson_ci95(r: f64, n: usize) -> Option<(f64, f64)> {
    if n <= 3 || r.abs() >= 1.0 {
        return None;
    }
    let z = r.atanh();
    let half = 1.959_963_984_540_054 / ((n - 3) as f64).sqrt();
    Some(((z - half).tanh(), (z + half).tanh()))
}

/// One sample of a label-omission study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmissionRecord {
    pub id: String,
    /// Pointwise `i^o(x; y | c)`.
    pub cmi: f64,
    pub cmi_per_dim: Vec<f64>,
    /// `||x_edited - x||` after encoding under `(y, c)` and decoding under `c`.
    pub l2: f64,
    pub delta_sq: Vec<f64>,
    /// `||decode(encode(x)) - x||` under `(y, c)`: the solver's own error.
    pub round_trip_l2: f64,
}

/// For every labeled sample: its conditional information and the effect of
/// dropping the label along the flow.
#[allow(clippy::too_many_arguments)]
pub fn omission_study(
    denoiser_full: &dyn Denoiser,
    denoiser_ctx: &dyn Denoiser,
    dataset: &[Sample],
    sampler: &LogSnrSampler,
    n_eps: usize,
    seed: u64,
    solver: &SolverConfig,
) -> Result<Vec<OmissionRecord>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let y = s
                .condition
                .as_ref()
                .filter(|c| c.label.is_some())
                .ok_or_else(|| Error::Config(format!("sample {} carries no label condition", s.id)))?;
            let ctx = y.without_label();
            let ctx_ref = if ctx.is_unconditional() { None } else { Some(&ctx) };
            let info = pointwise_terms(
                Term::new(denoiser_ctx, ctx_ref),
                Term::new(denoiser_full, Some(y)),
                &s.x,
                sampler,
                n_eps,
                seed,
                i as u64,
            )?
            .orthogonal;
            let latent = encode(&s.x, denoiser_full, Some(y), solver)?.terminal().to_vec();
            let edited = decode(&latent, denoiser_ctx, ctx_ref, solver)?.terminal().to_vec();
            let back = decode(&latent, denoiser_full, Some(y), solver)?.terminal().to_vec();
            let delta_sq: Vec<f64> = s.x.iter().zip(&edited).map(|(a, b)| (a - b) * (a - b)).collect();
            let rt: f64 = s.x.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(OmissionRecord {
                id: s.id.clone(),
                cmi: info.total,
                cmi_per_dim: info.per_dim,
                l2: delta_sq.iter().sum::<f64>().sqrt(),
                delta_sq,
                round_trip_l2: rt.sqrt(),
            })
        })
        .collect()
}

/// Check of "omitting an uninformative label changes nothing".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullEffect {
    pub cmi_threshold: f64,
    pub n_low: usize,
    /// 95th percentile of omission L2 over the low-information samples.
    pub p95_l2: f64,
    /// 95th percentile of round-trip L2 over the same samples.
    pub p95_round_trip: f64,
    pub factor: f64,
    pub holds: bool,
}

pub fn null_effect(records: &[OmissionRecord], cmi_threshold: f64, factor: f64) -> Result<NullEffect> {
    let low: Vec<&OmissionRecord> = records.iter().filter(|r| r.cmi < cmi_threshold).collect();
    if low.is_empty() {
        return Err(Error::Degenerate(format!("no sample has CMI below {cmi_threshold}")));
    }
    let p95_l2 = percentile(&low.iter().map(|r| r.l2).collect::<Vec<_>>(), 0.95);
    let p95_round_trip = percentile(&low.iter().map(|r| r.round_trip_l2).collect::<Vec<_>>(), 0.95);
    Ok(NullEffect {
        cmi_threshold,
        n_low: low.len(),
        p95_l2,
        p95_round_trip,
        factor,
        holds: p95_l2 <= factor * p95_round_trip,
    })
}

/// Two labels under one context whose means differ only in the first
/// `informative` of `dim` coordinates (unit diagonal covariances).
pub fn localized_spec(dim: usize, informative: usize, separation: f64) -> Result<GmmSpec> {
    if informative == 0 || informative > dim {
        return Err(Error::Config(format!(
            "need 1 <= informative <= dim, got {informative} of {dim}"
        )));
    }
    let mean = |sign: f64| -> Vec<f64> {
        (0..dim)
            .map(|j| {
                if j < informative {
                    sign * separation / 2.0
                } else {
                    0.25 * j as f64
                }
            })
            .collect()
    };
    GmmSpec::new(
        vec![
            Component::isotropic(0.5, mean(1.0), 1.0),
            Component::isotropic(0.5, mean(-1.0), 1.0),
        ],
        vec![
            ConditionEntry::new("on", vec![0]).in_context(["scene"]),
            ConditionEntry::new("off", vec![1]).in_context(["scene"]),
        ],
    )
}

/// Three contexts in two dimensions: one where the label is implied by the
/// context (no conditional information), one with two nearby labels and one
/// with two distant labels.
pub fn omission_spec() -> Result<GmmSpec> {
    let c = |w, m: [f64; 2]| Component::isotropic(w, m.to_vec(), 0.5);
    GmmSpec::new(
        vec![
            c(1.0 / 3.0, [3.0, 3.0]),
            c(1.0 / 6.0, [-3.0, -0.75]),
            c(1.0 / 6.0, [-3.0, 0.75]),
            c(1.0 / 6.0, [0.0, -4.0]),
            c(1.0 / 6.0, [4.0, -4.0]),
        ],
        vec![
            ConditionEntry::new("jet", vec![0]).in_context(["turboprop"]),
            ConditionEntry::new("cat", vec![1]).in_context(["pet"]),
            ConditionEntry::new("dog", vec![2]).in_context(["pet"]),
            ConditionEntry::new("car", vec![3]).in_context(["road"]),
            ConditionEntry::new("bus", vec![4]).in_context(["road"]),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::{gmm_mmse, ZeroDenoiser};
    use proptest::prelude::*;

    fn assets<'a>(den: &'a dyn Denoiser, sampler: &'a LogSnrSampler, score: PointwiseKind) -> ScoreAssets<'a> {
        ScoreAssets {
            uncond: den,
            cond: den,
            sampler,
            n_eps: 1,
            seed: 0,
            score,
        }
    }

    #[test]
    fn identical_candidates_tie_on_first() {
        let den = ZeroDenoiser { dim: 1 };
        let s = LogSnrSampler::default().with_draws(4).unwrap();
        let c = vec![Condition::label("a"), Condition::label("b"), Condition::label("c")];
        let r = rank_conditions(&[0.0], &c, &assets(&den, &s, PointwiseKind::Orthogonal), 0).unwrap();
        assert_eq!(r.chosen, 0);
        assert!(r.tie);
        assert!(rank_conditions(&[0.0], &c[..1], &assets(&den, &s, PointwiseKind::Orthogonal), 0).is_err());
    }

    #[test]
    fn likelihood_ratio_ranks_separated_labels() {
        let spec = GmmSpec::labeled_by_component(vec![
            Component::isotropic(0.5, vec![4.0], 1.0),
            Component::isotropic(0.5, vec![-4.0], 1.0),
        ])
        .unwrap();
        let den = gmm_mmse(spec.clone()).unwrap();
        let s = LogSnrSampler::default().with_draws(50).unwrap();
        let items = ranking_items_from_gmm(&spec, 200, Some("sep"), &mut rng_for(1, 0)).unwrap();
        let rep = evaluate_ranking(&items, &assets(&den, &s, PointwiseKind::Standard)).unwrap();
        assert!(rep.accuracy >= 0.95, "{}", rep.accuracy);
        assert_eq!(rep.by_relation["sep"], rep.accuracy);
    }

    #[test]
    fn orthogonal_score_prefers_the_wrong_component() {
        // For a point clearly from one component the unconditional denoiser
        // already agrees with the true label, so i^o is largest for the other.
        let spec = GmmSpec::labeled_by_component(vec![
            Component::isotropic(0.5, vec![4.0], 1.0),
            Component::isotropic(0.5, vec![-4.0], 1.0),
        ])
        .unwrap();
        let den = gmm_mmse(spec.clone()).unwrap();
        let s = LogSnrSampler::default().with_draws(50).unwrap();
        let items = ranking_items_from_gmm(&spec, 50, None, &mut rng_for(1, 0)).unwrap();
        let rep = evaluate_ranking(&items, &assets(&den, &s, PointwiseKind::Orthogonal)).unwrap();
        assert!(rep.accuracy <= 0.05, "{}", rep.accuracy);
    }

    #[test]
    fn ranking_items_are_validated() {
        let mut it = RankingItem {
            id: "a".into(),
            x: vec![0.0],
            truth: Condition::label("a"),
            distractors: vec![],
            relation: None,
        };
        assert!(it.validate().is_err());
        it.distractors = vec![Condition::label("a")];
        assert!(it.validate().is_err());
        it.distractors = vec![Condition::label("b")];
        assert!(it.validate().is_ok());
        assert_eq!(it.candidates()[0], Condition::label("a"));
    }

    #[test]
    fn heatmap_equal_to_truth_is_perfect() {
        let truth = vec![true, false, true, false];
        let heat: Vec<f64> = truth.iter().map(|t| if *t { 1.0 } else { 0.0 }).collect();
        for t in [0.01, 0.5, 1.0] {
            let s = segment_from_heatmap(&HeatmapEval {
                heatmap: heat.clone(),
                truth_mask: truth.clone(),
                threshold: t,
            })
            .unwrap();
            assert_eq!(s.iou, 1.0);
        }
    }

    #[test]
    fn uniform_heatmap_is_the_whole_image() {
        let truth = vec![true, true, false, false, false];
        let s = sweep_threshold(&[0.3; 5], &truth).unwrap();
        assert_eq!(s.iou, 2.0 / 5.0);
        assert!(s.mask.iter().all(|m| *m));
    }

    #[test]
    fn empty_masks_follow_the_convention() {
        assert_eq!(iou(&[false, false], &[false, false]), 1.0);
        assert_eq!(iou(&[true, false], &[false, false]), 0.0);
        assert!(segment_from_heatmap(&HeatmapEval {
            heatmap: vec![-1.0, 0.0],
            truth_mask: vec![true, false],
            threshold: 0.5
        })
        .is_err());
    }

    #[test]
    fn pearson_edge_cases() {
        let s = [1.0, 2.0, 4.0, 7.0];
        let up: Vec<f64> = s.iter().map(|v| 2.0 * v + 1.0).collect();
        let down: Vec<f64> = s.iter().map(|v| -v).collect();
        assert!((intervention_correlation(&s, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((intervention_correlation(&s, &down).unwrap() + 1.0).abs() < 1e-12);
        match intervention_correlation(&[1.0; 4], &s) {
            Err(Error::Degenerate(m)) => assert!(m.contains("scores")),
            other => panic!("{other:?}"),
        }
        match intervention_correlation(&s, &[2.0; 4]) {
            Err(Error::Degenerate(m)) => assert!(m.contains("deltas")),
            other => panic!("{other:?}"),
        }
        assert!(intervention_correlation(&s[..2], &up[..2]).is_err());
        let (lo, hi) = pearson_ci95(0.5, 100).unwrap();
        assert!(lo < 0.5 && 0.5 < hi);
    }

    #[test]
    fn per_dim_correlation_skips_constant_maps() {
        let scores = vec![vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0], vec![3.0, 2.0, 1.0]];
        let deltas = vec![vec![2.0, 4.0, 6.0], vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]];
        let r = per_dim_correlation(&scores, &deltas).unwrap();
        assert_eq!((r.n_used, r.n_skipped), (2, 1));
        assert!(r.mean_r.abs() < 1e-12);
    }

    #[test]
    fn permutation_test_detects_strong_association() {
        let s: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let d: Vec<f64> = s.iter().map(|v| v + (v * 7.3).sin()).collect();
        let p = permutation_p_value(&s, &d, 999, 3).unwrap();
        assert!(p <= 0.002, "{p}");
        let p_null =
            permutation_p_value(&s, &s.iter().map(|v| (v * 12.9898).sin()).collect::<Vec<_>>(), 999, 3).unwrap();
        assert!(p_null > 0.01);
    }

    #[test]
    fn localized_information_stays_on_its_coordinates() {
        let spec = localized_spec(6, 2, 3.0).unwrap();
        let den = gmm_mmse(spec.clone()).unwrap();
        let data = spec.sample(30, &mut rng_for(2, 0)).unwrap();
        let s = LogSnrSampler::default().with_draws(30).unwrap();
        let r = crate::info_estimators::cmi(&den, &den, &data, PointwiseKind::Orthogonal, &s, 2, 0).unwrap();
        let on: f64 = r.aggregate.per_dim[..2].iter().sum();
        assert!(on >= 0.9 * r.aggregate.total);
        let seg = sweep_threshold(&r.aggregate.per_dim, &[true, true, false, false, false, false]).unwrap();
        assert!(seg.iou >= 0.9);
    }

    #[test]
    fn uninformative_label_leaves_points_alone() {
        let spec = omission_spec().unwrap();
        let den = gmm_mmse(spec.clone()).unwrap();
        let data = spec.sample(30, &mut rng_for(4, 0)).unwrap();
        let recs = omission_study(
            &den,
            &den,
            &data,
            &LogSnrSampler::default(),
            2,
            0,
            &SolverConfig::default(),
        )
        .unwrap();
        let ne = null_effect(&recs, 0.01, 3.0).unwrap();
        assert!(ne.n_low > 0 && ne.holds, "{ne:?}");
        for (r, d) in recs.iter().zip(&data) {
            if d.condition.as_ref().unwrap().context == ["turboprop"] {
                assert!(r.cmi < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn sweep_dominates_every_grid_threshold(
            heat in proptest::collection::vec(0.0f64..5.0, 1..20),
            bits in proptest::collection::vec(any::<bool>(), 20),
            k in 0usize..=100,
        ) {
            let truth = &bits[..heat.len()];
            let best = sweep_threshold(&heat, truth).unwrap();
            let fixed = segment_from_heatmap(&HeatmapEval {
                heatmap: heat.clone(), truth_mask: truth.to_vec(), threshold: k as f64 / 100.0,
            }).unwrap();
            prop_assert!((0.0..=1.0).contains(&best.iou));
            prop_assert!((0.0..=1.0).contains(&fixed.iou));
            prop_assert!(best.iou >= fixed.iou);
        }

        #[test]
        fn ranking_ignores_a_common_offset(scores in proptest::collection::vec(-5.0f64..5.0, 2..6), c in -100.0f64..100.0) {
            let cands: Vec<Condition> = (0..scores.len()).map(|i| Condition::label(format!("c{i}"))).collect();
            let a = pick(&cands, scores.clone());
            let b = pick(&cands, scores.iter().map(|s| s + c).collect());
            // Offsets can merge near-equal scores under rounding; compare only clear winners.
            let sorted = { let mut s = scores.clone(); s.sort_by(|a, b| b.total_cmp(a)); s };
            if sorted[0] - sorted[1] > 1e-9 {
                prop_assert_eq!(a.chosen, b.chosen);
            }
        }
    }
}

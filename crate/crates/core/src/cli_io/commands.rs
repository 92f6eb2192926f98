use std::f64::consts::LN_2;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::config::*;
use super::export::*;
use crate::analytic_oracle as oracle;
use crate::applications::*;
use crate::denoisers::*;
use crate::error::Error;
use crate::flow_ode::{decode, encode};
use crate::info_estimators::*;
use crate::noise_channel::LogSnr;
use crate::numeric::{format_float, rng_for};

/// Data generation draws from its own stream so it never overlaps the
/// per-sample estimator streams `0..n`.
const DATA_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Estimate,
    Decompose,
    Rank,
    Intervene,
    Train,
    Oracle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Decompose => "decompose",
            Command::Rank => "rank",
            Command::Intervene => "intervene",
            Command::Train => "train",
            Command::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub bits: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

fn config_err(e: Error) -> CliError {
    match e {
        Error::Config(m) => CliError::Config(m),
        other => CliError::Config(other.to_string()),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs one command and returns a one-line summary for stdout.
pub fn run(command: Command, opts: &RunOptions) -> CliResult<String> {
    let mut cfg = RunConfig::load(&opts.config).map_err(config_err)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if opts.bits {
        cfg.units = Units::Bits;
    }
    if command == Command::Train {
        cfg.train.mlp.seed = cfg.seed;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Run(Error::Config(e.to_string())))?;
    std::fs::create_dir_all(&opts.out).map_err(Error::from)?;
    let model = Model::load(&cfg.model)?;
    let ctx = Ctx {
        cfg: &cfg,
        model: &model,
        out: &opts.out,
        command,
    };
    pool.install(|| match command {
        Command::Estimate => ctx.estimate(),
        Command::Decompose => ctx.decompose(),
        Command::Rank => ctx.rank(),
        Command::Intervene => ctx.intervene(),
        Command::Train => ctx.train(),
        Command::Oracle => ctx.oracle(),
    })
}

enum Model {
    Gmm(GmmDenoiser),
    Linear(LinearGaussianDenoiser),
    Mlp(MlpDenoiser),
}

impl Model {
    fn load(cfg: &ModelConfig) -> CliResult<Self> {
        Ok(match cfg {
            ModelConfig::Gmm(spec) => Model::Gmm(gmm_mmse(spec.clone()).map_err(config_err)?),
            ModelConfig::LinearGaussian(spec) => {
                Model::Linear(LinearGaussianDenoiser::new(spec.clone()).map_err(config_err)?)
            }
            ModelConfig::Checkpoint(path) => {
                match load_checkpoint(path)
                    .map_err(|e| CliError::Config(format!("model.checkpoint {}: {e}", path.display())))?
                {
                    Checkpoint::Gmm(spec) => Model::Gmm(gmm_mmse(spec).map_err(config_err)?),
                    Checkpoint::Mlp(net) => Model::Mlp(net),
                }
            }
        })
    }

    fn denoiser(&self) -> &dyn Denoiser {
        match self {
            Model::Gmm(d) => d,
            Model::Linear(d) => d,
            Model::Mlp(d) => d,
        }
    }

    fn gmm(&self) -> Option<&GmmSpec> {
        match self {
            Model::Gmm(d) => Some(d.spec()),
            _ => None,
        }
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    model: &'a Model,
    out: &'a Path,
    command: Command,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'static str,
    units: Units,
    config: &'a RunConfig,
    result: T,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn units(&self) -> &'static str {
        match self.cfg.units {
            Units::Nats => "nats",
            Units::Bits => "bits",
        }
    }

    fn scale(&self) -> f64 {
        match self.cfg.units {
            Units::Nats => 1.0,
            Units::Bits => 1.0 / LN_2,
        }
    }

    fn convert(&self, r: InfoReport) -> InfoReport {
        match self.cfg.units {
            Units::Nats => r,
            Units::Bits => r.to_bits(),
        }
    }

    fn convert_dataset(&self, d: DatasetReport) -> DatasetReport {
        DatasetReport {
            aggregate: self.convert(d.aggregate),
            samples: d
                .samples
                .into_iter()
                .map(|s| SampleReport {
                    id: s.id,
                    report: self.convert(s.report),
                })
                .collect(),
        }
    }

    fn write_envelope<T: Serialize>(&self, file: &str, result: T) -> CliResult<()> {
        write_json(
            &self.path(file),
            &Envelope {
                command: self.command.name(),
                units: self.cfg.units,
                config: self.cfg,
                result,
            },
        )?;
        Ok(())
    }

    fn dataset(&self) -> CliResult<Vec<Sample>> {
        if let Some(s) = &self.cfg.data.samples {
            return Ok(s.clone());
        }
        let n = self.cfg.data.generate;
        if n == 0 {
            return Err(CliError::Config("data.generate must be positive".into()));
        }
        let mut rng = rng_for(self.cfg.seed, DATA_STREAM);
        Ok(match self.model {
            Model::Gmm(d) => d.spec().sample(n, &mut rng)?,
            Model::Linear(d) => d.sample(n, &mut rng)?,
            Model::Mlp(_) => {
                return Err(CliError::Config(
                    "data.samples is required when the model is a trained network".into(),
                ))
            }
        })
    }

    fn sampler(&self) -> CliResult<crate::noise_channel::LogSnrSampler> {
        self.cfg.sampler.sampler().map_err(config_err)
    }

    fn estimate(&self) -> CliResult<String> {
        let data = self.dataset()?;
        let den = self.model.denoiser();
        let s = self.sampler()?;
        let (n_eps, seed) = (self.cfg.sampler.n_eps, self.cfg.seed);
        let est = &self.cfg.estimate;
        let report = match est.kind {
            EstimateKind::Nll => nll_dataset(den, &data, est.conditional, &s, n_eps, seed)?,
            EstimateKind::Mi => mi(den, den, &data, est.estimator, &s, n_eps, seed)?,
            EstimateKind::Cmi => cmi(den, den, &data, est.estimator, &s, n_eps, seed)?,
            EstimateKind::PointwiseS | EstimateKind::PointwiseO => {
                let set = mi_terms(den, den, &data, &s, n_eps, seed)?;
                let (mut d, kind) = if est.kind == EstimateKind::PointwiseS {
                    (set.standard, EstimatorKind::PointwiseS)
                } else {
                    (set.orthogonal, EstimatorKind::PointwiseO)
                };
                d.aggregate.estimator_kind = kind;
                d.samples.iter_mut().for_each(|s| s.report.estimator_kind = kind);
                d
            }
        };
        let report = self.convert_dataset(report);
        write_reports_csv(&self.path("estimate.csv"), &report.samples)?;
        let a = &report.aggregate;
        let line = format!(
            "estimate {}: {} ± {} {} over {} samples",
            serde_json::to_value(a.estimator_kind)?.as_str().unwrap_or("?"),
            format_float(a.total),
            format_float(a.std_error),
            self.units(),
            a.n_samples
        );
        self.write_envelope("estimate.json", &report)?;
        Ok(line)
    }

    fn decompose(&self) -> CliResult<String> {
        let data = self.dataset()?;
        let den = self.model.denoiser();
        let s = self.sampler()?;
        let (n_eps, seed) = (self.cfg.sampler.n_eps, self.cfg.seed);
        let dc = &self.cfg.decompose;
        let set = match dc.kind {
            InfoKind::Mi => mi_terms(den, den, &data, &s, n_eps, seed)?,
            InfoKind::Cmi => cmi_terms(den, den, &data, &s, n_eps, seed)?,
        };
        let report = self.convert_dataset(set.orthogonal);
        let d = den.dim();
        let positions = |r: &InfoReport| r.per_position(dc.channels).map_err(config_err);
        if let Some([h, w]) = dc.grid {
            if h * w * dc.channels != d {
                return Err(CliError::Config(format!(
                    "decompose.grid {h}x{w} with {} channels does not match dimension {d}",
                    dc.channels
                )));
            }
        }
        let mean_heat = positions(&report.aggregate)?;
        if let Some(m) = &dc.truth_mask {
            if m.len() != mean_heat.len() {
                return Err(CliError::Config(format!(
                    "decompose.truth_mask has {} entries, expected {}",
                    m.len(),
                    mean_heat.len()
                )));
            }
        }
        let rows: Vec<(String, Vec<f64>)> = report
            .samples
            .iter()
            .map(|s| (s.id.clone(), s.report.per_dim.clone()))
            .collect();
        write_vectors_csv(&self.path("decompose.csv"), "d", &rows)?;
        if let Some([h, w]) = dc.grid {
            write_pgm(&self.path("heatmap_mean.pgm"), w, h, &mean_heat)?;
            for (i, s) in report.samples.iter().take(dc.max_images).enumerate() {
                write_pgm(&self.path(&format!("heatmap_{i:04}.pgm")), w, h, &positions(&s.report)?)?;
            }
        }
        let segmentation = match &dc.truth_mask {
            Some(mask) => {
                let best = sweep_threshold(&mean_heat, mask)?;
                let per_sample: Vec<f64> = report
                    .samples
                    .iter()
                    .map(|s| Ok(sweep_threshold(&positions(&s.report)?, mask)?.iou))
                    .collect::<CliResult<_>>()?;
                let whole = iou(&vec![true; mask.len()], mask);
                Some(json!({
                    "mean_heatmap": best,
                    "mean_iou_per_sample": crate::numeric::mean(&per_sample),
                    "whole_image_iou": whole,
                }))
            }
            None => None,
        };
        let mass_line = format!(
            "decompose {}: total {} {} across {} dimensions",
            if dc.kind == InfoKind::Mi { "mi" } else { "cmi" },
            format_float(report.aggregate.total),
            self.units(),
            d
        );
        self.write_envelope(
            "decompose.json",
            json!({
                "aggregate": report.aggregate,
                "mean_heatmap": mean_heat,
                "segmentation": segmentation,
                "samples": report.samples,
            }),
        )?;
        Ok(mass_line)
    }

    fn rank(&self) -> CliResult<String> {
        let rc = &self.cfg.rank;
        let items = match (&rc.items, self.model.gmm()) {
            (Some(items), _) => items.clone(),
            (None, Some(spec)) => ranking_items_from_gmm(
                spec,
                rc.n_items,
                rc.relation.as_deref(),
                &mut rng_for(self.cfg.seed, DATA_STREAM),
            )?,
            (None, None) => {
                return Err(CliError::Config(
                    "rank.items is required unless the model is a mixture".into(),
                ))
            }
        };
        let den = self.model.denoiser();
        let s = self.sampler()?;
        let assets = ScoreAssets {
            uncond: den,
            cond: den,
            sampler: &s,
            n_eps: self.cfg.sampler.n_eps,
            seed: self.cfg.seed,
            score: rc.score,
        };
        let report = evaluate_ranking(&items, &assets)?;
        let (bayes, empirical_bayes) = match self.model.gmm() {
            Some(spec) => {
                let correct = items
                    .iter()
                    .map(|it| Ok(oracle::bayes_label(spec, &it.x, &it.truth.context)? == it.truth))
                    .collect::<crate::Result<Vec<bool>>>()?;
                let emp = correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64;
                (Some(oracle::gmm_bayes_accuracy(spec, 64)?), Some(emp))
            }
            None => (None, None),
        };
        let rows: Vec<Vec<String>> = report
            .outcomes
            .iter()
            .map(|o| {
                vec![
                    o.relation.clone().unwrap_or_default(),
                    o.id.clone(),
                    o.chosen.to_string(),
                    o.correct.to_string(),
                    o.tie.to_string(),
                    o.scores
                        .iter()
                        .map(|v| format_float(*v * self.scale()))
                        .collect::<Vec<_>>()
                        .join(";"),
                ]
            })
            .collect();
        let header: Vec<String> = ["task", "id", "chosen", "correct", "tie", "scores"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        write_rows(&self.path("rank.csv"), &header, &rows)?;
        let line = format!(
            "rank: accuracy {} over {} items",
            format_float(report.accuracy),
            report.n
        );
        self.write_envelope(
            "rank.json",
            json!({
                "score": rc.score,
                "accuracy": report.accuracy,
                "n": report.n,
                "n_ties": report.n_ties,
                "by_relation": report.by_relation,
                "bayes_accuracy": bayes,
                "empirical_bayes_accuracy": empirical_bayes,
            }),
        )?;
        Ok(line)
    }

    fn intervene(&self) -> CliResult<String> {
        let data = self.dataset()?;
        let den = self.model.denoiser();
        let s = self.sampler()?;
        let ic = &self.cfg.intervene;
        let mut recs = omission_study(
            den,
            den,
            &data,
            &s,
            self.cfg.sampler.n_eps,
            self.cfg.seed,
            &self.cfg.solver,
        )?;
        let null = null_effect(&recs, ic.cmi_threshold, ic.factor).ok();
        let k = self.scale();
        for r in &mut recs {
            r.cmi *= k;
            r.cmi_per_dim.iter_mut().for_each(|v| *v *= k);
        }
        let cmis: Vec<f64> = recs.iter().map(|r| r.cmi).collect();
        let l2s: Vec<f64> = recs.iter().map(|r| r.l2).collect();
        let correlation = match intervention_correlation(&cmis, &l2s) {
            Ok(r) => json!({
                "pearson": r,
                "ci95": pearson_ci95(r, recs.len()),
                "permutation_p": permutation_p_value(&cmis, &l2s, ic.n_permutations, self.cfg.seed)?,
                "n_permutations": ic.n_permutations,
            }),
            Err(Error::Degenerate(m)) => json!({ "degenerate": m }),
            Err(e) => return Err(e.into()),
        };
        let per_dim = per_dim_correlation(
            &recs.iter().map(|r| r.cmi_per_dim.clone()).collect::<Vec<_>>(),
            &recs.iter().map(|r| r.delta_sq.clone()).collect::<Vec<_>>(),
        )
        .ok();
        let rows: Vec<Vec<String>> = recs
            .iter()
            .map(|r| {
                vec![
                    r.id.clone(),
                    format_float(r.cmi),
                    format_float(r.l2),
                    format_float(r.round_trip_l2),
                ]
            })
            .collect();
        let header: Vec<String> = ["id", "cmi", "l2", "round_trip_l2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        write_rows(&self.path("intervene.csv"), &header, &rows)?;
        for (i, smp) in data.iter().take(ic.trajectories).enumerate() {
            let y = smp
                .condition
                .as_ref()
                .ok_or_else(|| Error::Config(format!("sample {} carries no condition", smp.id)))?;
            let ctx = y.without_label();
            let ctx_ref = if ctx.is_unconditional() { None } else { Some(&ctx) };
            let enc = encode(&smp.x, den, Some(y), &self.cfg.solver)?;
            let dec = decode(enc.terminal(), den, ctx_ref, &self.cfg.solver)?;
            enc.write_csv(std::fs::File::create(self.path(&format!("traj_{i:04}_encode.csv")))?)?;
            dec.write_csv(std::fs::File::create(self.path(&format!("traj_{i:04}_decode.csv")))?)?;
        }
        let line = format!(
            "intervene: {} samples, null effect {}",
            recs.len(),
            match &null {
                Some(n) if n.holds => "holds",
                Some(_) => "violated",
                None => "untested (no low-information samples)",
            }
        );
        self.write_envelope(
            "intervene.json",
            json!({
                "correlation": correlation,
                "per_dim_correlation": per_dim,
                "null_effect": null,
                "samples": recs,
            }),
        )?;
        Ok(line)
    }

    fn train(&self) -> CliResult<String> {
        let data = self.dataset()?;
        let s = self.sampler()?;
        let tc = &self.cfg.train;
        let outcome = train_mlp(&data, &s, &tc.mlp)?;
        let net = outcome.denoiser;
        save_checkpoint(self.path("model.ckpt"), &Checkpoint::Mlp(net.clone()))?;
        let rows: Vec<Vec<String>> = outcome
            .loss_trace
            .iter()
            .map(|(step, l)| vec![step.to_string(), format_float(*l)])
            .collect();
        write_rows(&self.path("loss.csv"), &["step".to_string(), "loss".to_string()], &rows)?;
        let analytic_variance = self.model.gmm().and_then(|spec| {
            let c = &spec.components[..];
            let isotropic = c.len() == 1
                && (0..c[0].mean.len()).all(|i| {
                    (0..c[0].mean.len()).all(|j| {
                        if i == j {
                            c[0].covariance[i][i] == c[0].covariance[0][0]
                        } else {
                            c[0].covariance[i][j] == 0.0
                        }
                    })
                });
            isotropic.then(|| c[0].covariance[0][0])
        });
        let mut evals = Vec::new();
        for &a in &tc.eval_alphas {
            let (mse, se) = empirical_mse(&net, &data, LogSnr(a), false, tc.n_eval, self.cfg.seed)?;
            let reference = match self.model {
                Model::Mlp(_) => None,
                m => Some(empirical_mse(
                    m.denoiser(),
                    &data,
                    LogSnr(a),
                    false,
                    tc.n_eval,
                    self.cfg.seed,
                )?),
            };
            let analytic = analytic_variance
                .map(|v| oracle::mmse_gaussian(v, LogSnr(a)).map(|r| r.value))
                .transpose()?;
            evals.push(json!({
                "alpha": a,
                "mse": mse,
                "std_error": se,
                "closed_form_mse": reference.map(|r| r.0),
                "analytic_mmse": analytic,
                "relative_gap": analytic.map(|m| (mse - m) / m),
            }));
        }
        let last = outcome.loss_trace.last().map_or(f64::NAN, |l| l.1);
        self.write_envelope(
            "train.json",
            json!({
                "parameters": net.n_parameters(),
                "layer_widths": net.layer_widths(),
                "final_loss": last,
                "eval": evals,
            }),
        )?;
        Ok(format!(
            "train: {} steps, final loss {}, {} parameters",
            tc.mlp.steps,
            format_float(last),
            net.n_parameters()
        ))
    }

    fn oracle(&self) -> CliResult<String> {
        let queries = if self.cfg.oracle.queries.is_empty() {
            self.default_queries()?
        } else {
            self.cfg.oracle.queries.clone()
        };
        let spec = || {
            self.model
                .gmm()
                .ok_or_else(|| CliError::Config("mixture oracle queries need model.gmm".into()))
        };
        let k = self.scale();
        let mut results = Vec::new();
        let mut lines = Vec::new();
        for q in &queries {
            let (r, is_info) = match q {
                OracleQuery::GaussianMi { rho } => (oracle::gaussian_mi(*rho).map_err(config_err)?, true),
                OracleQuery::MmseGaussian { variance, alpha } => (
                    oracle::mmse_gaussian(*variance, LogSnr(*alpha)).map_err(config_err)?,
                    false,
                ),
                OracleQuery::GaussianPointwise { x, y, covariance } => {
                    let n = covariance.len();
                    if covariance.iter().any(|r| r.len() != n) {
                        return Err(CliError::Config(
                            "oracle gaussian_pointwise covariance must be square".into(),
                        ));
                    }
                    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| covariance[i][j]);
                    (oracle::gaussian_pointwise(x, y, &m).map_err(config_err)?, true)
                }
                OracleQuery::GmmMi { resolution } => (oracle::gmm_mi_numeric(spec()?, *resolution)?, true),
                OracleQuery::GmmCmi { resolution } => (oracle::gmm_cmi_numeric(spec()?, *resolution)?, true),
                OracleQuery::GmmMiBand {
                    alpha_lo,
                    alpha_hi,
                    resolution,
                } => (oracle::gmm_mi_band(spec()?, *alpha_lo, *alpha_hi, *resolution)?, true),
                OracleQuery::GmmBayesAccuracy { resolution } => {
                    (oracle::gmm_bayes_accuracy(spec()?, *resolution)?, false)
                }
            };
            let r = if is_info {
                oracle::OracleResult {
                    value: r.value * k,
                    abs_error_bound: r.abs_error_bound * k,
                    ..r
                }
            } else {
                r
            };
            lines.push(serde_json::to_string(&json!({ "query": q, "result": r }))?);
            results.push(json!({ "query": q, "result": r }));
        }
        self.write_envelope("oracle.json", json!({ "results": results }))?;
        Ok(lines.join("\n"))
    }

    fn default_queries(&self) -> CliResult<Vec<OracleQuery>> {
        match (&self.cfg.model, self.model.gmm()) {
            (_, Some(spec)) => {
                let mut q = vec![OracleQuery::GmmMi { resolution: 64 }];
                if spec.condition_map.iter().any(|e| !e.context.is_empty()) {
                    q.push(OracleQuery::GmmCmi { resolution: 64 });
                }
                q.push(OracleQuery::GmmBayesAccuracy { resolution: 64 });
                Ok(q)
            }
            (ModelConfig::LinearGaussian(lg), _) if lg.x_dim == 1 && lg.mean.len() == 2 => {
                let c = &lg.covariance;
                Ok(vec![OracleQuery::GaussianMi {
                    rho: c[0][1] / (c[0][0] * c[1][1]).sqrt(),
                }])
            }
            _ => Err(CliError::Config("oracle.queries is required for this model".into())),
        }
    }
}

//! The JSON run configuration. Every section except `model` has defaults;
//! unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::applications::RankingItem;
use crate::denoisers::{GmmSpec, LinearGaussianSpec, Sample, TrainConfig};
use crate::error::{Error, Result};
use crate::flow_ode::SolverConfig;
use crate::info_estimators::PointwiseKind;
use crate::noise_channel::LogSnrSampler;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; all cores when absent. Results do not depend on it.
    #[serde(default)]
    pub workers: Option<usize>,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub units: Units,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub decompose: DecomposeConfig,
    #[serde(default)]
    pub rank: RankConfig,
    #[serde(default)]
    pub intervene: InterveneConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub oracle: OracleConfig,
}

/// Where the denoiser (and, for closed-form models, the data) comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Gmm(GmmSpec),
    LinearGaussian(LinearGaussianSpec),
    /// Path to a checkpoint, relative to the config file.
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Inline samples; takes precedence over `generate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Sample>>,
    /// Number of samples to draw from a closed-form model.
    #[serde(default = "default_generate")]
    pub generate: usize,
}

fn default_generate() -> usize {
    1000
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples: None,
            generate: default_generate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub loc: f64,
    pub scale: f64,
    pub clip: f64,
    pub n_snr: usize,
    pub n_eps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            loc: 1.0,
            scale: 2.0,
            clip: 3.0,
            n_snr: 100,
            n_eps: 1,
        }
    }
}

impl SamplerConfig {
    pub fn sampler(&self) -> Result<LogSnrSampler> {
        LogSnrSampler::new(self.loc, self.scale, self.clip, self.n_snr)
            .map_err(|e| Error::Config(format!("sampler: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    Nats,
    Bits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    Nll,
    #[default]
    Mi,
    Cmi,
    PointwiseS,
    PointwiseO,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub kind: EstimateKind,
    /// Pointwise estimator averaged by `mi` / `cmi`.
    pub estimator: PointwiseKind,
    /// For `nll`: condition on each sample's own condition.
    pub conditional: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InfoKind {
    Mi,
    #[default]
    Cmi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeConfig {
    pub kind: InfoKind,
    /// `[height, width]` of the spatial grid, for image export.
    pub grid: Option<[usize; 2]>,
    /// Values per grid position (summed into one heatmap pixel).
    pub channels: usize,
    /// Ground-truth region per grid position, for the threshold sweep.
    pub truth_mask: Option<Vec<bool>>,
    /// Per-sample images to write in addition to the dataset mean.
    pub max_images: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        DecomposeConfig {
            kind: InfoKind::Cmi,
            grid: None,
            channels: 1,
            truth_mask: None,
            max_images: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankConfig {
    /// Inline items; otherwise `n_items` are drawn from a mixture model.
    pub items: Option<Vec<RankingItem>>,
    pub n_items: usize,
    pub relation: Option<String>,
    pub score: PointwiseKind,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            items: None,
            n_items: 200,
            relation: None,
            score: PointwiseKind::Orthogonal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterveneConfig {
    pub cmi_threshold: f64,
    pub factor: f64,
    pub n_permutations: usize,
    /// Export encode/decode trajectories for this many leading samples.
    pub trajectories: usize,
}

impl Default for InterveneConfig {
    fn default() -> Self {
        InterveneConfig {
            cmi_threshold: 0.01,
            factor: 3.0,
            n_permutations: 999,
            trajectories: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Network and optimizer settings; its `seed` is replaced by the run seed.
    pub mlp: TrainConfig,
    pub eval_alphas: Vec<f64>,
    pub n_eval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mlp: TrainConfig::default(),
            eval_alphas: vec![-2.0, 0.0, 2.0],
            n_eval: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleQuery {
    GaussianMi {
        rho: f64,
    },
    MmseGaussian {
        variance: f64,
        alpha: f64,
    },
    GaussianPointwise {
        x: Vec<f64>,
        y: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
    /// The remaining queries use the configured mixture model.
    GmmMi {
        resolution: usize,
    },
    GmmCmi {
        resolution: usize,
    },
    GmmMiBand {
        alpha_lo: f64,
        alpha_hi: f64,
        resolution: usize,
    },
    GmmBayesAccuracy {
        resolution: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Empty means: whatever applies to the model.
    pub queries: Vec<OracleQuery>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let ModelConfig::Checkpoint(p) = &mut cfg.model {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.sampler()?;
        if self.sampler.n_eps == 0 {
            return Err(Error::Config("sampler.n_eps must be positive".into()));
        }
        self.solver.validate()?;
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        match &self.model {
            ModelConfig::Gmm(spec) => spec.validate().map_err(|e| Error::Config(format!("model.gmm: {e}")))?,
            ModelConfig::LinearGaussian(spec) => {
                crate::denoisers::LinearGaussianDenoiser::new(spec.clone())
                    .map_err(|e| Error::Config(format!("model.linear_gaussian: {e}")))?;
            }
            ModelConfig::Checkpoint(_) => {}
        }
        if self.data.samples.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(Error::Config("data.samples is empty".into()));
        }
        if self.decompose.channels == 0 {
            return Err(Error::Config("decompose.channels must be positive".into()));
        }
        if let Some(items) = &self.rank.items {
            for it in items {
                it.validate().map_err(|e| Error::Config(format!("rank.items: {e}")))?;
            }
        }
        if !(self.intervene.cmi_threshold > 0.0) || !(self.intervene.factor > 0.0) {
            return Err(Error::Config(
                "intervene.cmi_threshold and intervene.factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

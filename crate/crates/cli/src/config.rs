//! Run configuration: one JSON document per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use newsfusion::data::Split;
use newsfusion::eval::{ReportOptions, DEFAULT_MAPE_EPS};
use newsfusion::mixture::MixtureSpec;
use newsfusion::predictors::{PredictorKind, DEFAULT_HIDDEN_DIM};
use newsfusion::synth::SynthConfig;
use newsfusion::train::{ModelSpec, Scheme, TrainConfig};
use newsfusion::varlab::{ProbDist, SignalDist};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required here or through `--seed`; propagated to every section.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub varlab: VarlabSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Predictor for standalone runs; mixture schemes always pair
    /// FACTORS_ALONE with FUSION_COMBINATION.
    pub kind: PredictorKind,
    pub hidden_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: PredictorKind::FusionCombination, hidden_dim: DEFAULT_HIDDEN_DIM }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
    pub mape_eps: f64,
    pub pooled_ic: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: Split::Test, mape_eps: DEFAULT_MAPE_EPS, pooled_ic: false }
    }
}

impl EvalSection {
    pub fn report_options(&self) -> ReportOptions {
        ReportOptions { mape_eps: self.mape_eps, pooled_ic: self.pooled_ic }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarlabSection {
    pub p: ProbDist,
    pub zeta: SignalDist,
    pub samples: usize,
    /// Instances sampled by the probe of a trained mixture.
    pub probe_instances: usize,
    pub probe_split: Split,
}

impl Default for VarlabSection {
    fn default() -> Self {
        Self {
            p: ProbDist::Uniform { lo: 0.2, hi: 0.8 },
            zeta: SignalDist { mean: vec![1.0], std: vec![1.0] },
            samples: 1_000_000,
            probe_instances: 1000,
            probe_split: Split::Test,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies the seed override.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize::<_, RunConfig>(de).map_err(|e| {
                    CliError::Validation(format!("config {}: `{}`: {}", p.display(), e.path(), e.inner()))
                })?
            }
            None => RunConfig::default(),
        };
        if seed.is_some() {
            cfg.seed = seed;
        }
        let seed = cfg
            .seed
            .ok_or_else(|| CliError::Validation("`seed` is mandatory (set it in the config or pass --seed)".into()))?;
        cfg.train.seed = seed;
        if let Some(s) = cfg.synth.as_mut() {
            s.seed = seed;
        }
        if cfg.data.is_some() && cfg.synth.is_some() {
            return Err(CliError::Validation("config has both `data` and `synth`; give one".into()));
        }
        if let Some(s) = &cfg.synth {
            s.validate().map_err(|e| CliError::Validation(format!("`synth`: {e}")))?;
        }
        if cfg.model.hidden_dim == 0 {
            return Err(CliError::Validation("`model.hidden_dim` must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved config has a seed")
    }

    pub fn model_spec(&self, d_f: usize, d_n: usize) -> ModelSpec {
        match self.train.scheme {
            Scheme::Standalone => ModelSpec::Predictor(
                newsfusion::PredictorSpec::new(self.model.kind, d_f, d_n).with_hidden(self.model.hidden_dim),
            ),
            Scheme::MixtureConventional | Scheme::MixtureDecoupled => {
                ModelSpec::Mixture(MixtureSpec { hidden_dim: self.model.hidden_dim, ..MixtureSpec::new(d_f, d_n) })
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

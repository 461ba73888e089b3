//! Per-verb JSON configs. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use unlearn_core::data::ForgetMode;
use unlearn_core::distance::dv::DvNetConfig;
use unlearn_core::error::{Error, Result};
use unlearn_core::eval::EvalConfig;
use unlearn_core::experiment::{ExperimentConfig, KlChoice, SyntheticDataConfig};
use unlearn_core::model::{LossConstants, TrainConfig};
use unlearn_core::sampler::SgldConfig;
use unlearn_core::unlearn::CertBudget;

pub type GenConfig = SyntheticDataConfig;

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitMethod {
    /// Retain/forget split of a source set.
    Forget(ForgetMode),
    /// Per-class Dirichlet(ξ, ξ) source/surrogate split.
    Dirichlet { xi: f64 },
    /// Random train/test split holding out `count` rows.
    Holdout { count: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub input: PathBuf,
    pub method: SplitMethod,
    /// Class count when the input has no sidecar.
    #[serde(default)]
    pub class_count: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainVerbConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub constants: LossConstants,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Newton step with the true retain Hessian.
    Exact,
    /// Newton step with the Hessian estimated on the surrogate set.
    #[default]
    Surrogate,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct UnlearnVerbConfig {
    /// Model trained on the source set.
    pub model: PathBuf,
    pub forget: PathBuf,
    #[serde(default)]
    pub mechanism: Mechanism,
    /// Retain set; required by the exact mechanism.
    #[serde(default)]
    pub retain: Option<PathBuf>,
    /// Surrogate set; required by the surrogate mechanism.
    #[serde(default)]
    pub surrogate: Option<PathBuf>,
    /// Source size `n`; required by the surrogate mechanism.
    #[serde(default)]
    pub n_source: Option<usize>,
    /// Model trained on the surrogate set; trained on the fly when absent.
    #[serde(default)]
    pub surrogate_model: Option<PathBuf>,
    #[serde(default)]
    pub kl_method: KlChoice,
    #[serde(default)]
    pub constants: LossConstants,
    #[serde(default)]
    pub budget: CertBudget,
    #[serde(default)]
    pub hessian_jitter: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sgld: SgldConfig,
    #[serde(default)]
    pub dv: DvNetConfig,
    /// Also write the pre-noise parameters, for forget-score evaluation.
    #[serde(default)]
    pub write_pre_noise: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub model: PathBuf,
    /// Dataset whose per-feature range sets the init box when `sgld` gives none.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub sgld: SgldConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct KlVerbConfig {
    pub model: PathBuf,
    pub surrogate: PathBuf,
    #[serde(default)]
    pub surrogate_model: Option<PathBuf>,
    /// Precomputed source samples for the DV pipeline; drawn by SGLD when absent.
    #[serde(default)]
    pub samples: Option<PathBuf>,
    #[serde(default)]
    pub kl_method: KlChoice,
    #[serde(default)]
    pub constants: LossConstants,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sgld: SgldConfig,
    #[serde(default)]
    pub dv: DvNetConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvalEntry {
    pub name: String,
    pub path: PathBuf,
    /// Pre-noise parameters; with the certificate next to `path` this enables the forget score.
    #[serde(default)]
    pub pre_noise: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvalVerbConfig {
    pub original: PathBuf,
    pub retrain: PathBuf,
    pub models: Vec<EvalEntry>,
    pub train: PathBuf,
    pub test: PathBuf,
    pub retain: PathBuf,
    pub forget: PathBuf,
    #[serde(default)]
    pub constants: LossConstants,
    #[serde(default)]
    pub eval: EvalConfig,
}

pub fn schema_for(verb: &str) -> Option<serde_json::Value> {
    let s = match verb {
        "gen" => schemars::schema_for!(GenConfig),
        "split" => schemars::schema_for!(SplitConfig),
        "train" | "retrain" => schemars::schema_for!(TrainVerbConfig),
        "unlearn" => schemars::schema_for!(UnlearnVerbConfig),
        "sample" => schemars::schema_for!(SampleConfig),
        "kl" => schemars::schema_for!(KlVerbConfig),
        "eval" => schemars::schema_for!(EvalVerbConfig),
        "experiment" => schemars::schema_for!(ExperimentConfig),
        _ => return None,
    };
    Some(s.to_value())
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Loads `path` when given, otherwise the defaults.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load)
}

pub fn require<T: DeserializeOwned>(path: Option<&Path>, verb: &str) -> Result<T> {
    let p = path.ok_or_else(|| Error::InvalidArgument(format!("{verb} needs --config <path>")))?;
    load(p)
}

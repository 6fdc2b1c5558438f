//! Declarative run description, parsed from JSON.
//!
//! Precedence is flags > file > defaults. Harness-dependent settings left out
//! of the file resolve through the `*_or_default` accessors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sparsegrad::normalization::{Normalizer, StrengthMap};
use sparsegrad::optim::StepSchedule;
use sparsegrad::regularizers::{RegularizerKind, RegularizerSpec};

use crate::error::{ExperimentError, Result};

/// Environment variable replacing the configured seed.
pub const SEED_ENV: &str = "SPARSEGRAD_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Harness {
    Channel,
    Wiring,
    Gcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Thresholded gates, plain relu backward.
    DsExact,
    /// Thresholded gates, elu-derivative backward.
    DsRectified,
    ProxL1,
    ProxGroup,
    ProxExclusive,
    /// Free gates (or a dense adjacency) without any regularizer.
    DenseBaseline,
    /// Adjacency fixed to the true graph; GCN only.
    FixedAdjacencyBaseline,
}

impl Method {
    pub fn is_prox(self) -> bool {
        matches!(self, Method::ProxL1 | Method::ProxGroup | Method::ProxExclusive)
    }

    pub fn is_ds(self) -> bool {
        matches!(self, Method::DsExact | Method::DsRectified)
    }

    /// Whether the regularizer enters the objective or the prox step.
    pub fn is_regularized(self) -> bool {
        self.is_ds() || self.is_prox()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ClassifyParams {
    pub samples: usize,
    pub features: usize,
    /// Standard deviation of the label noise added before thresholding.
    pub noise: f64,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        ClassifyParams { samples: 1200, features: 16, noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct WiringDataParams {
    pub samples: usize,
    pub features: usize,
    pub teacher_nodes: usize,
    /// In-edges per teacher node.
    pub fan_in: usize,
    pub classes: usize,
}

impl Default for WiringDataParams {
    fn default() -> Self {
        WiringDataParams { samples: 1500, features: 16, teacher_nodes: 8, fan_in: 3, classes: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrafficParams {
    pub nodes: usize,
    pub steps: usize,
    /// Weight of the neighbour average in the diffusion step.
    pub rho: f64,
    /// Per-step retention of the deviation from the node mean.
    pub persistence: f64,
    /// Standard deviation of the innovation, in speed units.
    pub noise: f64,
}

impl Default for TrafficParams {
    fn default() -> Self {
        TrafficParams { nodes: 30, steps: 2000, rho: 0.7, persistence: 0.95, noise: 2.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct DataConfig {
    /// Load a dataset written by `gen-data` (path without extension)
    /// instead of generating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Seed of the data generator; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub classify: ClassifyParams,
    #[serde(default)]
    pub wiring: WiringDataParams,
    #[serde(default)]
    pub traffic: TrafficParams,
}

/// What the GCN regularizer is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegTarget {
    /// Rows and columns of the normalized adjacency.
    #[default]
    Normalized,
    /// Rows and columns of the thresholded strengths before normalization.
    Thresholded,
    /// Rows and columns of the free parameters.
    Alpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ChannelModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ChannelModelConfig {
    fn default() -> Self {
        ChannelModelConfig { hidden: vec![32, 32, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct WiringModelConfig {
    pub nodes: usize,
    pub width: usize,
}

impl Default for WiringModelConfig {
    fn default() -> Self {
        WiringModelConfig { nodes: 16, width: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GcnModelConfig {
    pub window: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub head_layers: usize,
    pub normalizer: Normalizer,
    pub strength: StrengthMap,
    pub reg_target: RegTarget,
    /// Initial alpha of the thresholded adjacency.
    pub init_alpha: f64,
    /// Initial thresholds; `None` puts every initial entry at half strength.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_beta: Option<f64>,
    /// Initial entries of the free adjacency used by proximal methods.
    pub prox_init: f64,
    /// Learn `exp(alpha)` strengths on the true support instead of fixing
    /// `1 / degree`.
    pub fixed_learn_strength: bool,
}

impl Default for GcnModelConfig {
    fn default() -> Self {
        GcnModelConfig {
            window: 8,
            hidden: 16,
            blocks: 5,
            head_layers: 3,
            normalizer: Normalizer::Balanced,
            strength: StrengthMap::Exp,
            reg_target: RegTarget::Normalized,
            init_alpha: 0.0,
            init_beta: None,
            prox_init: 1.0,
            fixed_learn_strength: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ModelConfig {
    #[serde(default)]
    pub channel: ChannelModelConfig,
    #[serde(default)]
    pub wiring: WiringModelConfig,
    #[serde(default)]
    pub gcn: GcnModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub harness: Harness,
    pub method: Method,
    pub regularizer: RegularizerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<StepSchedule>,
    /// L2 decay on weight parameters (never on architecture parameters).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    /// Lambda values for a sweep; empty means a single run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<f64>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

impl ExperimentConfig {
    pub fn new(harness: Harness, method: Method, regularizer: RegularizerSpec) -> Self {
        ExperimentConfig {
            harness,
            method,
            regularizer,
            epochs: None,
            batch_size: None,
            seed: 0,
            learning_rate: None,
            weight_decay: None,
            sweep: Vec::new(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
        }
    }

    pub fn epochs_or_default(&self) -> usize {
        self.epochs.unwrap_or(match self.harness {
            Harness::Channel | Harness::Wiring => 200,
            Harness::Gcn => 150,
        })
    }

    pub fn batch_size_or_default(&self) -> usize {
        self.batch_size.unwrap_or(match self.harness {
            Harness::Channel | Harness::Wiring => 64,
            Harness::Gcn => 32,
        })
    }

    pub fn learning_rate_or_default(&self) -> StepSchedule {
        self.learning_rate.clone().unwrap_or_else(|| match self.harness {
            Harness::Channel => StepSchedule::tenfold_decay(0.1),
            Harness::Wiring => StepSchedule::tenfold_decay(0.01),
            Harness::Gcn => StepSchedule::late_halving(0.0005),
        })
    }

    pub fn weight_decay_or_default(&self) -> f64 {
        self.weight_decay.unwrap_or(match self.harness {
            Harness::Channel | Harness::Wiring => 5e-4,
            Harness::Gcn => 0.0,
        })
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn lambda(&self) -> f64 {
        self.regularizer.lambda
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut c = self.clone();
        c.regularizer.lambda = lambda;
        c.sweep.clear();
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(ExperimentError::Config(msg));
        self.regularizer.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.epochs == Some(0) {
            return invalid("epochs must be positive".into());
        }
        if self.batch_size_or_default() < 2 {
            return invalid("batch-size must be at least 2".into());
        }
        let lr = self.learning_rate_or_default();
        if !(lr.base > 0.0 && lr.base.is_finite()) || lr.milestones.iter().any(|(at, f)| !(at.is_finite() && *f > 0.0))
        {
            return invalid(format!("invalid learning-rate schedule {lr:?}"));
        }
        if !(self.weight_decay_or_default() >= 0.0) {
            return invalid("weight-decay must be >= 0".into());
        }
        if let Some(bad) = self.sweep.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return invalid(format!("sweep lambda {bad} must be >= 0"));
        }
        let kind = self.regularizer.kind;
        if self.method.is_prox() {
            let expected = match self.method {
                Method::ProxL1 => RegularizerKind::L1,
                Method::ProxGroup => RegularizerKind::GroupL21,
                _ => RegularizerKind::ExclusiveL12,
            };
            if matches!(kind, RegularizerKind::Lp { .. }) {
                return invalid("proximal methods have no closed-form step for lp".into());
            }
            if kind != expected {
                return invalid(format!("{:?} needs the {expected:?} regularizer, got {kind:?}", self.method));
            }
        }
        if self.harness == Harness::Gcn {
            if let RegularizerKind::Lp { p } = kind {
                if p != 0.5 {
                    return invalid(format!("gcn lp regularizer uses p = 0.5, got {p}"));
                }
            }
            let g = &self.model.gcn;
            if g.window == 0 || g.hidden == 0 || g.blocks == 0 || g.head_layers == 0 {
                return invalid("gcn window, hidden, blocks and head-layers must be positive".into());
            }
            if g.prox_init <= 0.0 {
                return invalid("gcn prox-init must be positive".into());
            }
            let t = &self.data.traffic;
            if t.nodes < 2 || t.steps < 10 * (g.window + 1) {
                return invalid(format!("traffic data needs >= 2 nodes and >= {} steps", 10 * (g.window + 1)));
            }
        } else if self.method == Method::FixedAdjacencyBaseline {
            return invalid("fixed-adjacency-baseline is only defined for the gcn harness".into());
        }
        if self.harness == Harness::Channel && self.model.channel.hidden.contains(&0) {
            return invalid("channel widths must be positive".into());
        }
        if self.harness == Harness::Wiring && (self.model.wiring.nodes < 2 || self.model.wiring.width == 0) {
            return invalid("wiring net needs >= 2 nodes and positive width".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Apply one `key=value` override. Keys are dotted paths into the JSON
    /// form; `lambda` is short for `regularizer.lambda`. Values parse as JSON
    /// and fall back to plain strings.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        *self = with_override(self, assignment, |key| match key {
            "lambda" => "regularizer.lambda",
            k => k,
        })?;
        Ok(())
    }
}

/// `value` with one `key=value` assignment applied to its JSON form.
/// Re-parsing rejects unknown keys.
fn with_override<T>(value: &T, assignment: &str, alias: impl Fn(&str) -> &str) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = alias(key.trim());
    let parsed = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut tree = serde_json::to_value(value)?;
    let mut node = &mut tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| ExperimentError::Config(format!("override key `{key}` descends into a non-object")))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed.clone());
            break;
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    serde_json::from_value(tree).map_err(|e| ExperimentError::Config(format!("override `{key}`: {e}")))
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(seed) => seed
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| ExperimentError::Config(format!("{SEED_ENV}={seed} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// What `gen-data` writes: one dataset kind, its generator parameters and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenDataConfig {
    pub kind: crate::data::DatasetKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub classify: ClassifyParams,
    #[serde(default)]
    pub wiring: WiringDataParams,
    #[serde(default)]
    pub traffic: TrafficParams,
}

impl GenDataConfig {
    pub fn new(kind: crate::data::DatasetKind) -> Self {
        GenDataConfig {
            kind,
            seed: 0,
            classify: ClassifyParams::default(),
            wiring: WiringDataParams::default(),
            traffic: TrafficParams::default(),
        }
    }

    /// Keys are dotted paths into the JSON form, e.g. `traffic.nodes=30`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        *self = with_override(self, assignment, |k| k)?;
        Ok(())
    }

    /// Parameters of the selected kind, as recorded in the sidecar.
    pub fn params(&self) -> Result<Value> {
        use crate::data::DatasetKind;
        Ok(match self.kind {
            DatasetKind::Classify => serde_json::to_value(&self.classify)?,
            DatasetKind::Wiring => serde_json::to_value(&self.wiring)?,
            DatasetKind::TrafficGraph => serde_json::to_value(&self.traffic)?,
        })
    }

    /// Seed from the environment, then overrides in order.
    pub fn resolve(mut self, overrides: &[String]) -> Result<Self> {
        if let Some(seed) = seed_from_env()? {
            self.seed = seed;
        }
        for o in overrides {
            self.apply_override(o)?;
        }
        Ok(self)
    }
}

/// Read a config file, then apply the seed environment variable and the
/// overrides in order, and validate.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = seed_from_env()? {
        config.seed = seed;
    }
    for o in overrides {
        config.apply_override(o)?;
    }
    config.validate()?;
    Ok(config)
}

//! Experiment configuration (TOML) and its provenance digest.

use std::path::Path;

use lccs_core::baselines::StrategyKind;
use lccs_core::synth::{DomainSpec, StreamOrder, StreamPolicy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    MomentShift,
    WarpedShift,
}

impl Preset {
    pub fn domains(self, task_seed: u64) -> (DomainSpec, DomainSpec) {
        match self {
            Preset::MomentShift => DomainSpec::moment_shift(task_seed),
            Preset::WarpedShift => DomainSpec::warped_shift(task_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub preset: Preset,
    pub train_size: usize,
    pub test_size: usize,
    /// Target samples the support set is drawn from (disjoint from the test set).
    pub pool_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { preset: Preset::MomentShift, train_size: 700, test_size: 700, pool_size: 700 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Conv,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Hidden width of the MLP.
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { arch: Arch::Conv, hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub jitter: f64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self { epochs: 15, lr: 0.01, batch: 32, jitter: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierChoice {
    /// Nearest-centroid for `k ≥ 5`, the source head otherwise.
    Auto,
    Source,
    Finetuned,
    Ncc,
}

impl ClassifierChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(Self::Auto),
            "source" => Some(Self::Source),
            "finetuned" => Some(Self::Finetuned),
            "ncc" => Some(Self::Ncc),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    /// Strategy names: none, lccs, adabn, testtime-bn, tent, ft-bn, ft-classifier, ncc.
    pub strategies: Vec<String>,
    /// Shots per class evaluated for support-based strategies.
    pub k: Vec<usize>,
    /// Spanning-vector count; absent means `k·K` for `k ≥ 5`, else 1.
    pub n: Option<usize>,
    /// Epochs for the statistic EMA and the gradient stage.
    pub epochs: usize,
    pub grid_steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub classifier: ClassifierChoice,
    pub convex: bool,
    pub greedy_init: bool,
    pub init_stage: bool,
    pub gradient_stage: bool,
    /// Learning rate of the online entropy-minimization baseline.
    pub tent_lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            strategies: vec!["none".into(), "lccs".into(), "adabn".into()],
            k: vec![1, 5],
            n: None,
            epochs: 10,
            grid_steps: 10,
            lr: 1e-3,
            batch: 32,
            classifier: ClassifierChoice::Auto,
            convex: false,
            greedy_init: false,
            init_stage: true,
            gradient_stage: true,
            tent_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub batch: usize,
    pub order: StreamOrderName,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamOrderName {
    #[serde(rename = "shuffled")]
    Shuffled,
    #[serde(rename = "by-class")]
    ByClass,
}

impl From<StreamOrderName> for StreamOrder {
    fn from(o: StreamOrderName) -> Self {
        match o {
            StreamOrderName::Shuffled => StreamOrder::Shuffled,
            StreamOrderName::ByClass => StreamOrder::ByClass,
        }
    }
}

impl StreamConfig {
    pub fn policy(&self, seed: u64) -> StreamPolicy {
        StreamPolicy::new(self.batch, self.order.into(), self.alpha, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: SourceTrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    pub streams: Vec<StreamConfig>,
    /// Check that offline strategies predict identically under every stream.
    #[serde(default = "yes")]
    pub assert_stream_invariance: bool,
}

fn yes() -> bool {
    true
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: SourceTrainConfig::default(),
            adapt: AdaptConfig::default(),
            streams: vec![
                StreamConfig { batch: 128, order: StreamOrderName::Shuffled, alpha: 1.0 },
                StreamConfig { batch: 8, order: StreamOrderName::ByClass, alpha: 1.0 },
                StreamConfig { batch: 32, order: StreamOrderName::Shuffled, alpha: 10.0 },
            ],
            assert_stream_invariance: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn strategies(&self) -> Result<Vec<StrategyKind>, ConfigError> {
        self.adapt
            .strategies
            .iter()
            .map(|s| StrategyKind::from_name(s).ok_or_else(|| ConfigError::Invalid(format!("unknown strategy {s:?}"))))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.seeds.is_empty() {
            return invalid("at least one seed is required");
        }
        if self.streams.is_empty() {
            return invalid("at least one stream policy is required");
        }
        if self.streams.iter().any(|s| s.batch == 0 || s.alpha.is_nan() || s.alpha < 1.0) {
            return invalid("stream batch must be positive and alpha at least 1");
        }
        let strategies = self.strategies()?;
        if self.assert_stream_invariance && strategies.iter().any(|s| s.is_online()) {
            return invalid("online strategies cannot be combined with the stream-invariance assertion");
        }
        if self.adapt.k.contains(&0) {
            return invalid("k must be positive");
        }
        if self.adapt.n == Some(0) {
            return invalid("n must be at least 1");
        }
        if self.adapt.batch == 0 || self.train.batch == 0 {
            return invalid("batch sizes must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

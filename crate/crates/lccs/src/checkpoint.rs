//! JSON checkpoints for models, including any LCCS state kept for audit.

use std::fs;
use std::path::Path;

use lccs_core::lccs::LccsLayerState;
use lccs_core::network::{BnLayer, BnMode, Head, Layer, Model};
use lccs_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_FORMAT: &str = "lccs-ckpt/1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint format {found:?} (expected {CHECKPOINT_FORMAT:?})")]
    Version { found: String },
    #[error("checkpoint shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDto {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorDto {
    fn from(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
}

impl TensorDto {
    fn into_tensor(self, what: &str) -> Result<Tensor, CheckpointError> {
        Tensor::new(&self.shape, self.data).map_err(|e| CheckpointError::Shape(format!("{what}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LccsDto {
    pub channels: usize,
    pub n: usize,
    /// Row-major `channels × (n+1)`.
    pub m: Vec<f64>,
    pub sigma_mat: Vec<f64>,
    pub eta: Vec<f64>,
    pub rho: Vec<f64>,
    pub sigma_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnModeDto {
    Train,
    Eval,
    TestTimeBn,
    Lccs,
}

impl From<BnMode> for BnModeDto {
    fn from(m: BnMode) -> Self {
        match m {
            BnMode::Train => Self::Train,
            BnMode::Eval => Self::Eval,
            BnMode::TestTimeBn => Self::TestTimeBn,
            BnMode::Lccs => Self::Lccs,
        }
    }
}

impl From<BnModeDto> for BnMode {
    fn from(m: BnModeDto) -> Self {
        match m {
            BnModeDto::Train => Self::Train,
            BnModeDto::Eval => Self::Eval,
            BnModeDto::TestTimeBn => Self::TestTimeBn,
            BnModeDto::Lccs => Self::Lccs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDto {
    Conv2d {
        weight: TensorDto,
    },
    Dense {
        weight: TensorDto,
        bias: Vec<f64>,
    },
    BatchNorm {
        mu: Vec<f64>,
        sigma: Vec<f64>,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        epsilon: f64,
        momentum: f64,
        mode: BnModeDto,
        batch_blend: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lccs: Option<LccsDto>,
    },
    Relu,
    GlobalAvgPool,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadDto {
    Linear { weight: TensorDto, bias: Vec<f64>, finetuned: bool },
    NearestCentroid { centroids: TensorDto },
}

/// How a checkpointed model was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationInfo {
    pub strategy: String,
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_layer_v: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n_effective: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<f64>,
    /// Optimizer learning rate for online strategies evaluated later.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online_lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDto {
    pub format: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerDto>,
    pub head: HeadDto,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptation: Option<AdaptationInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adaptation: Option<AdaptationInfo>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self { model, adaptation: None }
    }

    pub fn with_adaptation(mut self, info: AdaptationInfo) -> Self {
        self.adaptation = Some(info);
        self
    }

    pub fn to_dto(&self) -> CheckpointDto {
        let m = &self.model;
        let layers = m
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d { weight } => LayerDto::Conv2d { weight: weight.into() },
                Layer::Dense { weight, bias } => LayerDto::Dense { weight: weight.into(), bias: bias.clone() },
                Layer::BatchNorm(bn) => LayerDto::BatchNorm {
                    mu: bn.mu.clone(),
                    sigma: bn.sigma.clone(),
                    gamma: bn.gamma.clone(),
                    beta: bn.beta.clone(),
                    epsilon: bn.epsilon,
                    momentum: bn.momentum,
                    mode: bn.mode.into(),
                    batch_blend: bn.batch_blend,
                    lccs: bn.lccs.as_ref().map(|s| LccsDto {
                        channels: s.channels(),
                        n: s.n(),
                        m: s.m.clone(),
                        sigma_mat: s.sigma_mat.clone(),
                        eta: s.eta.clone(),
                        rho: s.rho.clone(),
                        sigma_floor: s.sigma_floor,
                    }),
                },
                Layer::Relu => LayerDto::Relu,
                Layer::GlobalAvgPool => LayerDto::GlobalAvgPool,
                Layer::Flatten => LayerDto::Flatten,
            })
            .collect();
        let head = match &m.head {
            Head::Linear { weight, bias, finetuned } => {
                HeadDto::Linear { weight: weight.into(), bias: bias.clone(), finetuned: *finetuned }
            }
            Head::NearestCentroid { centroids } => HeadDto::NearestCentroid { centroids: centroids.into() },
        };
        CheckpointDto {
            format: CHECKPOINT_FORMAT.to_string(),
            input_shape: m.input_shape.clone(),
            classes: m.classes,
            layers,
            head,
            adaptation: self.adaptation.clone(),
        }
    }

    pub fn from_dto(dto: CheckpointDto) -> Result<Self, CheckpointError> {
        if dto.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Version { found: dto.format });
        }
        let shape_err = |i: usize, e: lccs_core::Error| CheckpointError::Shape(format!("layer {i}: {e}"));
        let mut layers = Vec::with_capacity(dto.layers.len());
        for (i, l) in dto.layers.into_iter().enumerate() {
            layers.push(match l {
                LayerDto::Conv2d { weight } => Layer::Conv2d { weight: weight.into_tensor("conv weight")? },
                LayerDto::Dense { weight, bias } => Layer::Dense { weight: weight.into_tensor("dense weight")?, bias },
                LayerDto::BatchNorm { mu, sigma, gamma, beta, epsilon, momentum, mode, batch_blend, lccs } => {
                    let c = mu.len();
                    if sigma.len() != c || gamma.len() != c || beta.len() != c {
                        return Err(CheckpointError::Shape(format!("layer {i}: BN vectors differ in length")));
                    }
                    let mut bn = BnLayer::new(c);
                    (bn.mu, bn.sigma, bn.gamma, bn.beta) = (mu, sigma, gamma, beta);
                    (bn.epsilon, bn.momentum, bn.mode, bn.batch_blend) = (epsilon, momentum, mode.into(), batch_blend);
                    if let Some(s) = lccs {
                        if s.channels != c || s.eta.len() != s.n + 1 {
                            return Err(CheckpointError::Shape(format!(
                                "layer {i}: LCCS state does not match {c} channels and n = {}",
                                s.n
                            )));
                        }
                        bn.lccs = Some(
                            LccsLayerState::new(s.channels, s.m, s.sigma_mat, s.eta, s.rho, s.sigma_floor)
                                .map_err(|e| shape_err(i, e))?,
                        );
                    }
                    Layer::BatchNorm(bn)
                }
                LayerDto::Relu => Layer::Relu,
                LayerDto::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerDto::Flatten => Layer::Flatten,
            });
        }
        let head = match dto.head {
            HeadDto::Linear { weight, bias, finetuned } => {
                Head::Linear { weight: weight.into_tensor("head weight")?, bias, finetuned }
            }
            HeadDto::NearestCentroid { centroids } => {
                Head::NearestCentroid { centroids: centroids.into_tensor("centroids")? }
            }
        };
        let model = Model::new(layers, head, dto.input_shape).map_err(|e| CheckpointError::Shape(e.to_string()))?;
        if model.classes != dto.classes {
            return Err(CheckpointError::Shape(format!(
                "header declares {} classes, head has {}",
                dto.classes, model.classes
            )));
        }
        Ok(Self { model, adaptation: dto.adaptation })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_dto()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            Some(other) => return Err(CheckpointError::Version { found: other.to_string() }),
            None => return Err(CheckpointError::Malformed("missing format field".into())),
        }
        let dto: CheckpointDto =
            serde_json::from_value(value).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Self::from_dto(dto)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

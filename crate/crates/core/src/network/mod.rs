//! Layer stacks with a classifier head, forward passes on the tape and
//! parameter addressing for the optimizers.

mod bn;
mod train;

pub use bn::{ema_update, BatchStats, BnLayer, BnMode, BnVars, DEFAULT_EPSILON, DEFAULT_MOMENTUM, GAMMA_NUDGE};
pub use train::{jitter_inputs, train_source, TrainConfig};

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::data::rng;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Valid, stride-1 convolution without bias; weight `(Cout, Cin, kh, kw)`.
    Conv2d {
        weight: Tensor,
    },
    /// `x · weight + bias`; weight `(D, K)`.
    Dense {
        weight: Tensor,
        bias: Vec<f64>,
    },
    BatchNorm(BnLayer),
    Relu,
    GlobalAvgPool,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    SourceLinear,
    FinetunedLinear,
    NearestCentroid,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Linear {
        weight: Tensor,
        bias: Vec<f64>,
        finetuned: bool,
    },
    /// One centroid per class, `(K, D)`; logits are negative squared distances.
    NearestCentroid {
        centroids: Tensor,
    },
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Linear { finetuned: false, .. } => HeadKind::SourceLinear,
            Head::Linear { finetuned: true, .. } => HeadKind::FinetunedLinear,
            Head::NearestCentroid { .. } => HeadKind::NearestCentroid,
        }
    }

    fn input_width(&self) -> usize {
        match self {
            Head::Linear { weight, .. } => weight.shape()[0],
            Head::NearestCentroid { centroids } => centroids.shape()[1],
        }
    }

    fn classes(&self) -> usize {
        match self {
            Head::Linear { weight, .. } => weight.shape()[1],
            Head::NearestCentroid { centroids } => centroids.shape()[0],
        }
    }
}

/// Addresses one learnable array of a [`Model`]. Layer-scoped ids carry the
/// layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Weight(usize),
    Bias(usize),
    Gamma(usize),
    Beta(usize),
    Eta(usize),
    Rho(usize),
    HeadWeight,
    HeadBias,
}

/// Which parameter groups receive gradients in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub weights: bool,
    pub bn_affine: bool,
    pub lccs: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Self = Self { weights: false, bn_affine: false, lccs: false, head: false };
    pub const ALL_WEIGHTS: Self = Self { weights: true, bn_affine: true, lccs: false, head: true };
    pub const BN_AFFINE: Self = Self { bn_affine: true, ..Self::NONE };
    pub const LCCS: Self = Self { lccs: true, ..Self::NONE };
    pub const HEAD: Self = Self { head: true, ..Self::NONE };
}

/// What a BN layer saw during a forward pass.
#[derive(Debug, Clone)]
pub struct BnTrace {
    pub layer: usize,
    pub input: Var,
    pub batch: Option<BatchStats>,
}

/// A recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub tape: Tape,
    pub input: Var,
    pub features: Var,
    pub logits: Var,
    pub params: Vec<(ParamId, Var)>,
    pub bn: Vec<BnTrace>,
}

impl Forward {
    /// Gradients of the trainable parameters after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
            .iter()
            .map(|&(id, v)| {
                let g = self.tape.grad(v).map(<[f64]>::to_vec);
                (id, g.unwrap_or_else(|| vec![0.0; self.tape.value(v).numel()]))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub head: Head,
    pub classes: usize,
    /// Per-sample input shape (without the batch axis).
    pub input_shape: Vec<usize>,
}

fn infer_layer(layer: &Layer, shape: &[usize], index: usize) -> Result<Vec<usize>> {
    match layer {
        Layer::Conv2d { weight } => {
            ensure!(weight.rank() == 4, "conv layer {} needs a rank-4 weight", index);
            let w = weight.shape();
            ensure!(shape.len() == 3, "conv layer {} needs (C,H,W) input, got {:?}", index, shape);
            ensure!(shape[0] == w[1], "conv layer {} expects {} channels, got {}", index, w[1], shape[0]);
            ensure!(w[2] <= shape[1] && w[3] <= shape[2], "conv layer {} kernel exceeds input", index);
            Ok(vec![w[0], shape[1] - w[2] + 1, shape[2] - w[3] + 1])
        }
        Layer::Dense { weight, bias } => {
            ensure!(weight.rank() == 2, "dense layer {} needs a rank-2 weight", index);
            ensure!(shape.len() == 1 && shape[0] == weight.shape()[0], "dense layer {} input {:?}", index, shape);
            ensure!(bias.len() == weight.shape()[1], "dense layer {} bias length", index);
            Ok(vec![weight.shape()[1]])
        }
        Layer::BatchNorm(bn) => {
            ensure!(shape.len() == 1 || shape.len() == 3, "BN layer {} input {:?}", index, shape);
            ensure!(
                shape[0] == bn.channels(),
                "BN layer {} expects {} channels, got {}",
                index,
                bn.channels(),
                shape[0]
            );
            Ok(shape.to_vec())
        }
        Layer::Relu => Ok(shape.to_vec()),
        Layer::GlobalAvgPool => {
            ensure!(shape.len() == 3, "pooling layer {} needs (C,H,W) input", index);
            Ok(vec![shape[0]])
        }
        Layer::Flatten => Ok(vec![shape.iter().product()]),
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl Model {
    pub fn new(layers: Vec<Layer>, head: Head, input_shape: Vec<usize>) -> Result<Self> {
        let classes = head.classes();
        let model = Self { layers, head, classes, input_shape };
        model.feature_shape()?;
        Ok(model)
    }

    /// Per-sample shape after the last layer; validates the whole chain.
    pub fn feature_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = infer_layer(layer, &shape, i)?;
        }
        ensure!(
            shape.len() == 1 && shape[0] == self.head.input_width(),
            "head expects {} features, layers produce {:?}",
            self.head.input_width(),
            shape
        );
        ensure!(self.head.classes() == self.classes, "head class count mismatch");
        Ok(shape)
    }

    /// conv(C₀→8, 3×3) → BN → ReLU → conv(8→16, 3×3) → BN → ReLU → GAP → linear(16→K).
    pub fn reference_conv(input_shape: &[usize], classes: usize, seed: u64) -> Result<Self> {
        ensure!(input_shape.len() == 3, "reference conv net needs (C,H,W) inputs");
        let mut r = rng(seed);
        let c0 = input_shape[0];
        let layers = vec![
            Layer::Conv2d { weight: normal_tensor(&[8, c0, 3, 3], libm::sqrt(2.0 / (c0 * 9) as f64), &mut r) },
            Layer::BatchNorm(BnLayer::new(8)),
            Layer::Relu,
            Layer::Conv2d { weight: normal_tensor(&[16, 8, 3, 3], libm::sqrt(2.0 / 72.0), &mut r) },
            Layer::BatchNorm(BnLayer::new(16)),
            Layer::Relu,
            Layer::GlobalAvgPool,
        ];
        let head = Head::Linear {
            weight: normal_tensor(&[16, classes], libm::sqrt(1.0 / 16.0), &mut r),
            bias: vec![0.0; classes],
            finetuned: false,
        };
        Self::new(layers, head, input_shape.to_vec())
    }

    /// flatten → linear(D→hidden) → BN → ReLU → linear(hidden→K).
    pub fn reference_mlp(input_shape: &[usize], hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut r = rng(seed);
        let d: usize = input_shape.iter().product();
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                weight: normal_tensor(&[d, hidden], libm::sqrt(2.0 / d as f64), &mut r),
                bias: vec![0.0; hidden],
            },
            Layer::BatchNorm(BnLayer::new(hidden)),
            Layer::Relu,
        ];
        let head = Head::Linear {
            weight: normal_tensor(&[hidden, classes], libm::sqrt(1.0 / hidden as f64), &mut r),
            bias: vec![0.0; classes],
            finetuned: false,
        };
        Self::new(layers, head, input_shape.to_vec())
    }

    pub fn bn_indices(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter_map(|(i, l)| matches!(l, Layer::BatchNorm(_)).then_some(i)).collect()
    }

    pub fn bn(&self, index: usize) -> Option<&BnLayer> {
        match self.layers.get(index) {
            Some(Layer::BatchNorm(bn)) => Some(bn),
            _ => None,
        }
    }

    pub fn bn_mut(&mut self, index: usize) -> Option<&mut BnLayer> {
        match self.layers.get_mut(index) {
            Some(Layer::BatchNorm(bn)) => Some(bn),
            _ => None,
        }
    }

    pub fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BnLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BnLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for bn in self.bn_layers_mut() {
            bn.mode = mode;
        }
    }

    /// Per-sample input rank of each BN layer (1 for dense features, 3 for images).
    pub fn bn_input_ranks(&self) -> Result<Vec<(usize, usize)>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::BatchNorm(_)) {
                out.push((i, shape.len()));
            }
            shape = infer_layer(layer, &shape, i)?;
        }
        Ok(out)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        match id {
            ParamId::Weight(i) => match self.layers.get_mut(i)? {
                Layer::Conv2d { weight } | Layer::Dense { weight, .. } => Some(weight.data_mut()),
                _ => None,
            },
            ParamId::Bias(i) => match self.layers.get_mut(i)? {
                Layer::Dense { bias, .. } => Some(bias),
                _ => None,
            },
            ParamId::Gamma(i) => self.bn_mut(i).map(|b| b.gamma.as_mut_slice()),
            ParamId::Beta(i) => self.bn_mut(i).map(|b| b.beta.as_mut_slice()),
            ParamId::Eta(i) => self.bn_mut(i)?.lccs.as_mut().map(|s| s.eta.as_mut_slice()),
            ParamId::Rho(i) => self.bn_mut(i)?.lccs.as_mut().map(|s| s.rho.as_mut_slice()),
            ParamId::HeadWeight => match &mut self.head {
                Head::Linear { weight, .. } => Some(weight.data_mut()),
                Head::NearestCentroid { .. } => None,
            },
            ParamId::HeadBias => match &mut self.head {
                Head::Linear { bias, .. } => Some(bias),
                Head::NearestCentroid { .. } => None,
            },
        }
    }

    /// Runs the model on a batch `x` of shape `(N, ..input_shape)`.
    pub fn forward(&self, x: &Tensor, trainable: Trainable) -> Result<Forward> {
        ensure!(x.rank() >= 2 && x.shape()[0] > 0, "forward needs a nonempty batch");
        ensure!(
            x.shape()[1..] == self.input_shape[..],
            "input samples have shape {:?}, model expects {:?}",
            &x.shape()[1..],
            self.input_shape
        );
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let mut h = input;
        let mut params = Vec::new();
        let mut bn_traces = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Conv2d { weight } => {
                    let w = tape.leaf(weight.clone(), trainable.weights);
                    if trainable.weights {
                        params.push((ParamId::Weight(i), w));
                    }
                    tape.conv2d(h, w)?
                }
                Layer::Dense { weight, bias } => {
                    let w = tape.leaf(weight.clone(), trainable.weights);
                    let b = tape.leaf(Tensor::from_vec(bias.clone()), trainable.weights);
                    if trainable.weights {
                        params.push((ParamId::Weight(i), w));
                        params.push((ParamId::Bias(i), b));
                    }
                    let y = tape.matmul(h, w)?;
                    tape.add_bias(y, b)?
                }
                Layer::BatchNorm(bn) => {
                    let (vars, batch) = bn.apply(&mut tape, h, i, trainable.bn_affine, trainable.lccs)?;
                    if trainable.bn_affine {
                        params.push((ParamId::Gamma(i), vars.gamma));
                        params.push((ParamId::Beta(i), vars.beta));
                    }
                    if trainable.lccs {
                        if let (Some(e), Some(r)) = (vars.eta, vars.rho) {
                            params.push((ParamId::Eta(i), e));
                            params.push((ParamId::Rho(i), r));
                        }
                    }
                    bn_traces.push(BnTrace { layer: i, input: h, batch });
                    vars.output
                }
                Layer::Relu => tape.relu(h)?,
                Layer::GlobalAvgPool => tape.spatial_mean(h)?,
                Layer::Flatten => {
                    let n = tape.value(h).shape()[0];
                    let width = tape.value(h).numel() / n;
                    tape.reshape(h, &[n, width])?
                }
            };
        }
        let features = h;
        let logits = match &self.head {
            Head::Linear { weight, bias, .. } => {
                let w = tape.leaf(weight.clone(), trainable.head);
                let b = tape.leaf(Tensor::from_vec(bias.clone()), trainable.head);
                if trainable.head {
                    params.push((ParamId::HeadWeight, w));
                    params.push((ParamId::HeadBias, b));
                }
                let y = tape.matmul(features, w)?;
                tape.add_bias(y, b)?
            }
            Head::NearestCentroid { centroids } => {
                let c = tape.constant(centroids.clone());
                tape.neg_sq_dist(features, c)?
            }
        };
        Ok(Forward { tape, input, features, logits, params, bn: bn_traces })
    }

    /// Logits without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let fwd = self.forward(x, Trainable::NONE)?;
        Ok(fwd.tape.value(fwd.logits).clone())
    }

    /// Penultimate features (input to the head).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let fwd = self.forward(x, Trainable::NONE)?;
        Ok(fwd.tape.value(fwd.features).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Predictions for a whole dataset evaluated in chunks of `chunk` samples.
    /// Only meaningful for batch-independent (eval-pure) models.
    pub fn predict_chunked(&self, x: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            out.extend(self.predict(&x.slice_rows(start, end)?)?);
            start = end;
        }
        Ok(out)
    }

    /// Folds batch statistics recorded by a `Train`-mode forward into the running statistics.
    pub fn absorb_batch_stats(&mut self, traces: &[BnTrace]) {
        for trace in traces {
            if let Some(stats) = &trace.batch {
                if let Some(bn) = self.bn_mut(trace.layer) {
                    if bn.mode == BnMode::Train {
                        bn.absorb_batch(stats);
                    }
                }
            }
        }
    }

    pub fn bn_affine_param_count(&self) -> usize {
        self.bn_layers().map(|b| 2 * b.channels()).sum()
    }

    pub fn param_count(&self) -> usize {
        let layers: usize = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d { weight } => weight.numel(),
                Layer::Dense { weight, bias } => weight.numel() + bias.len(),
                Layer::BatchNorm(bn) => 2 * bn.channels(),
                _ => 0,
            })
            .sum();
        let head = match &self.head {
            Head::Linear { weight, bias, .. } => weight.numel() + bias.len(),
            Head::NearestCentroid { .. } => 0,
        };
        layers + head
    }
}

/// Number of learnable LCCS scalars: `η, ρ ∈ R^{n+1}` for every BN layer.
pub fn count_lccs_params(model: &Model, n: usize) -> Result<usize> {
    ensure!(n >= 1, "spanning-vector count n must be at least 1");
    Ok(2 * (n + 1) * model.bn_indices().len())
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

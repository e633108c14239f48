//! Comparison strategies: AdaBN, test-time BN, Tent, BN-parameter and
//! classifier finetuning, nearest-centroid heads.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{derive_seed, rng, shuffled_indices, training_batches, Dataset};
use crate::error::{ensure, Error, Result};
use crate::lccs::{collect_batch_stats, support_loss, StatsConfig, SupportSet};
use crate::network::{argmax_rows, BnMode, Head, Model, ParamId, Trainable};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StrategyKind {
    /// The unadapted source model.
    Source,
    Lccs,
    AdaBn,
    TestTimeBn,
    Tent,
    FinetuneBnParams,
    FinetuneClassifier,
    NccHead,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::Source,
        StrategyKind::Lccs,
        StrategyKind::AdaBn,
        StrategyKind::TestTimeBn,
        StrategyKind::Tent,
        StrategyKind::FinetuneBnParams,
        StrategyKind::FinetuneClassifier,
        StrategyKind::NccHead,
    ];

    /// Online strategies adapt while evaluating, so their predictions may
    /// depend on the composition of the test stream.
    pub fn is_online(self) -> bool {
        matches!(self, StrategyKind::TestTimeBn | StrategyKind::Tent)
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Source => "none",
            StrategyKind::Lccs => "lccs",
            StrategyKind::AdaBn => "adabn",
            StrategyKind::TestTimeBn => "testtime-bn",
            StrategyKind::Tent => "tent",
            StrategyKind::FinetuneBnParams => "ft-bn",
            StrategyKind::FinetuneClassifier => "ft-classifier",
            StrategyKind::NccHead => "ncc",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptStrategy {
    pub kind: StrategyKind,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
}

impl AdaptStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self { kind, optimizer: OptimizerConfig::adam(1e-3), epochs: 10 }
    }

    pub fn is_online(&self) -> bool {
        self.kind.is_online()
    }
}

/// Replaces every BN layer's statistics with statistics collected on `data`
/// (same EMA procedure as the LCCS support statistics) and freezes the model.
pub fn adabn_adapt(model: &Model, data: &Dataset, cfg: &StatsConfig) -> Result<Model> {
    let stats = collect_batch_stats(model, data, cfg)?;
    let mut out = model.clone();
    for s in stats {
        let bn = out.bn_mut(s.layer).expect("bn index");
        bn.mu = s.mu;
        bn.sigma = s.sigma;
        bn.lccs = None;
    }
    out.set_bn_mode(BnMode::Eval);
    Ok(out)
}

/// Predictions and logits of an online evaluation, in stream order.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOutcome {
    /// Dataset indices in the order they were evaluated.
    pub order: Vec<usize>,
    pub predictions: Vec<usize>,
    /// Row-major `(len, K)` logits.
    pub logits: Vec<f64>,
    /// Mean prediction entropy of each batch.
    pub entropy: Vec<f64>,
}

impl OnlineOutcome {
    /// Fraction of correct predictions against `labels` indexed by dataset index.
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let correct = self.order.iter().zip(&self.predictions).filter(|&(&i, &p)| labels[i] == p).count();
        correct as f64 / self.order.len().max(1) as f64
    }

    /// Predictions re-indexed by dataset position (`None` for samples not in the stream).
    pub fn by_index(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for (&i, &p) in self.order.iter().zip(&self.predictions) {
            out[i] = Some(p);
        }
        out
    }
}

fn online_eval(
    model: &Model,
    data: &Dataset,
    stream: &[Vec<usize>],
    blend: f64,
    tent: Option<&OptimizerConfig>,
) -> Result<OnlineOutcome> {
    ensure!(!stream.is_empty(), "stream has no batches");
    let mut model = model.clone();
    model.set_bn_mode(BnMode::TestTimeBn);
    for bn in model.bn_layers_mut() {
        bn.batch_blend = blend;
    }
    let mut opt = tent.map(|cfg| Optimizer::<ParamId>::new(*cfg));
    let trainable = if tent.is_some() { Trainable::BN_AFFINE } else { Trainable::NONE };
    let mut out = OnlineOutcome { order: Vec::new(), predictions: Vec::new(), logits: Vec::new(), entropy: Vec::new() };
    for batch in stream {
        ensure!(!batch.is_empty(), "stream contains an empty batch");
        let x = data.inputs.gather_rows(batch)?;
        let mut fwd = model.forward(&x, trainable)?;
        let ent = fwd.tape.entropy(fwd.logits)?;
        let logits = fwd.tape.value(fwd.logits).clone();
        out.entropy.push(fwd.tape.value(ent).data()[0]);
        out.predictions.extend(argmax_rows(&logits));
        out.logits.extend_from_slice(logits.data());
        out.order.extend_from_slice(batch);
        if let Some(opt) = opt.as_mut() {
            fwd.tape.backward(ent)?;
            for (id, grad) in fwd.param_grads() {
                if let Some(p) = model.param_mut(id) {
                    opt.update(&id, p, &grad);
                }
            }
        }
    }
    Ok(out)
}

/// Normalizes every batch with its own statistics (`blend = 1`) or a blend
/// `blend · batch + (1 − blend) · stored`. Nothing persists across batches.
pub fn testtime_bn_eval(model: &Model, data: &Dataset, stream: &[Vec<usize>], blend: f64) -> Result<OnlineOutcome> {
    ensure!((0.0..=1.0).contains(&blend), "blend must lie in [0, 1]");
    online_eval(model, data, stream, blend, None)
}

/// Test-time BN plus one optimizer step per batch on the batch's mean
/// prediction entropy, updating all BN `(γ, β)`. Predictions come from the
/// forward pass before the step; parameters and optimizer state persist.
pub fn tent_eval(
    model: &Model,
    data: &Dataset,
    stream: &[Vec<usize>],
    optimizer: &OptimizerConfig,
) -> Result<OnlineOutcome> {
    online_eval(model, data, stream, 1.0, Some(optimizer))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Model,
    /// Full-support loss before training and after each epoch.
    pub loss_curve: Vec<f64>,
}

fn finetune(
    model: &Model,
    support: &SupportSet,
    trainable: Trainable,
    optimizer: &OptimizerConfig,
    epochs: usize,
    seed: u64,
) -> Result<FinetuneOutcome> {
    ensure!(!support.is_empty(), "support set is empty");
    let mut model = model.clone();
    model.set_bn_mode(BnMode::Eval);
    let data = &support.data;
    let mut opt = Optimizer::<ParamId>::new(*optimizer);
    let mut order_rng = rng(derive_seed(seed, 0x6674));
    let mut loss_curve = vec![support_loss(&model, data)?];
    for _ in 0..epochs {
        let order = shuffled_indices(data.len(), &mut order_rng);
        for range in training_batches(data.len(), optimizer.batch_size) {
            let idx = &order[range];
            let x = data.inputs.gather_rows(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut fwd = model.forward(&x, trainable)?;
            let loss = fwd.tape.cross_entropy(fwd.logits, &labels)?;
            fwd.tape.backward(loss)?;
            for (id, grad) in fwd.param_grads() {
                if let Some(p) = model.param_mut(id) {
                    opt.update(&id, p, &grad);
                }
            }
        }
        loss_curve.push(support_loss(&model, data)?);
    }
    Ok(FinetuneOutcome { model, loss_curve })
}

/// Support cross-entropy descent on every BN `(γ, β)`; statistics stay at their stored values.
pub fn finetune_bn_params(
    model: &Model,
    support: &SupportSet,
    optimizer: &OptimizerConfig,
    epochs: usize,
    seed: u64,
) -> Result<FinetuneOutcome> {
    finetune(model, support, Trainable::BN_AFFINE, optimizer, epochs, seed)
}

/// Support cross-entropy descent on the linear head only.
pub fn finetune_classifier(
    model: &Model,
    support: &SupportSet,
    optimizer: &OptimizerConfig,
    epochs: usize,
    seed: u64,
) -> Result<FinetuneOutcome> {
    ensure!(matches!(model.head, Head::Linear { .. }), "classifier finetuning needs a linear head");
    let mut out = finetune(model, support, Trainable::HEAD, optimizer, epochs, seed)?;
    if let Head::Linear { finetuned, .. } = &mut out.model.head {
        *finetuned = true;
    }
    Ok(out)
}

/// Replaces the head with per-class mean support features under the model's
/// current BN configuration.
pub fn build_ncc_head(model: &Model, support: &SupportSet) -> Result<Model> {
    ensure!(!support.is_empty(), "support set is empty");
    let k = model.classes;
    let features = model.features(&support.data.inputs)?;
    let d = features.shape()[1];
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (row, &y) in features.data().chunks(d).zip(&support.data.labels) {
        ensure!(y < k, "support label {} outside {} classes", y, k);
        counts[y] += 1;
        for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(alloc::format!("class {} has no support samples", missing)));
    }
    for (c, &n) in counts.iter().enumerate() {
        for s in &mut sums[c * d..(c + 1) * d] {
            *s /= n as f64;
        }
    }
    let mut out = model.clone();
    out.head = Head::NearestCentroid { centroids: Tensor::new(&[k, d], sums)? };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(StrategyKind::from_name(k.name()), Some(k));
        }
        assert!(StrategyKind::Tent.is_online());
        assert!(!StrategyKind::Lccs.is_online());
    }
}

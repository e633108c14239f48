use rand::Rng;
use rand_distr::StandardNormal;

use super::{BnMode, Model, ParamId, Trainable};
use crate::data::{derive_seed, rng, shuffled_indices, training_batches, Dataset};
use crate::error::{ensure, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Standard deviation of additive Gaussian input jitter (the training augmentation).
    pub jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 15, optimizer: OptimizerConfig::adam(0.01), seed: 0, jitter: 0.0 }
    }
}

/// Adds `N(0, std²)` noise to every entry.
pub fn jitter_inputs(x: &mut Tensor, std: f64, rng: &mut impl Rng) {
    if std > 0.0 {
        for v in x.data_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Empirical-risk training of every weight, BN affine parameter and the head on
/// cross-entropy. BN layers run in train mode and accumulate running
/// statistics; on return they are switched to eval mode.
pub fn train_source(mut model: Model, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    ensure!(!data.is_empty(), "training set is empty");
    ensure!(data.classes <= model.classes, "dataset has {} classes, model head {}", data.classes, model.classes);
    let mut opt: Optimizer<ParamId> = Optimizer::new(cfg.optimizer);
    let mut order_rng = rng(derive_seed(cfg.seed, 0x7261_696e));
    let mut noise_rng = rng(derive_seed(cfg.seed, 0x6a69_7474));
    model.set_bn_mode(BnMode::Train);
    for _ in 0..cfg.epochs {
        let order = shuffled_indices(data.len(), &mut order_rng);
        for range in training_batches(data.len(), cfg.optimizer.batch_size) {
            let idx = &order[range];
            let mut x = data.inputs.gather_rows(idx)?;
            jitter_inputs(&mut x, cfg.jitter, &mut noise_rng);
            let labels: alloc::vec::Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut fwd = model.forward(&x, Trainable::ALL_WEIGHTS)?;
            let loss = fwd.tape.cross_entropy(fwd.logits, &labels)?;
            fwd.tape.backward(loss)?;
            for (id, grad) in fwd.param_grads() {
                if let Some(p) = model.param_mut(id) {
                    opt.update(&id, p, &grad);
                }
            }
            model.absorb_batch_stats(&fwd.bn);
        }
    }
    model.set_bn_mode(BnMode::Eval);
    Ok(model)
}

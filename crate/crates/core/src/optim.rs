//! Adam and SGD-with-momentum, keyed by parameter identity.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 32,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self { kind: OptimizerKind::SgdMomentum, momentum, ..Self::adam(lr) }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }
}

impl Default for OptimizerConfig {
    /// Adam, lr 0.001, batch 32.
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

#[derive(Debug, Clone)]
struct Slot {
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<K: Ord + Clone> {
    cfg: OptimizerConfig,
    slots: BTreeMap<K, Slot>,
}

impl<K: Ord + Clone> Optimizer<K> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, slots: BTreeMap::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update to `params` given its gradient.
    pub fn update(&mut self, key: &K, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        let cfg = self.cfg;
        let slot = self.slots.entry(key.clone()).or_insert_with(|| Slot {
            step: 0,
            first: vec![0.0; params.len()],
            second: vec![0.0; params.len()],
        });
        slot.step += 1;
        match cfg.kind {
            OptimizerKind::Adam => {
                let bc1 = 1.0 - libm::pow(cfg.beta1, slot.step as f64);
                let bc2 = 1.0 - libm::pow(cfg.beta2, slot.step as f64);
                for i in 0..params.len() {
                    let g = grad[i] + cfg.weight_decay * params[i];
                    slot.first[i] = cfg.beta1 * slot.first[i] + (1.0 - cfg.beta1) * g;
                    slot.second[i] = cfg.beta2 * slot.second[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = slot.first[i] / bc1;
                    let v_hat = slot.second[i] / bc2;
                    params[i] -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
                }
            }
            OptimizerKind::SgdMomentum => {
                for i in 0..params.len() {
                    let g = grad[i] + cfg.weight_decay * params[i];
                    slot.first[i] = cfg.momentum * slot.first[i] + g;
                    params[i] -= cfg.lr * slot.first[i];
                }
            }
        }
    }
}

//! Batch normalization layer with source statistics and four evaluation modes.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{BinaryOp, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::lccs::LccsLayerState;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
/// Added to zero entries of gamma so the statistic/parameter maps stay invertible.
pub const GAMMA_NUDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics, running statistics updated by EMA.
    Train,
    /// Stored statistics.
    Eval,
    /// Batch statistics; stored statistics untouched.
    TestTimeBn,
    /// Statistics synthesized from the layer's LCCS state.
    Lccs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: BnMode,
    /// Weight of the current batch when normalizing in `TestTimeBn` mode;
    /// `1.0` uses pure batch statistics.
    pub batch_blend: f64,
    pub lccs: Option<LccsLayerState>,
}

/// Statistics of one batch at one BN layer (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Variables a BN layer placed on the tape.
#[derive(Debug, Clone, Copy)]
pub struct BnVars {
    pub output: Var,
    pub gamma: Var,
    pub beta: Var,
    pub eta: Option<Var>,
    pub rho: Option<Var>,
}

pub fn ema_update(old: &[f64], batch_stat: &[f64], momentum: f64) -> Vec<f64> {
    debug_assert_eq!(old.len(), batch_stat.len());
    old.iter().zip(batch_stat).map(|(&o, &b)| (1.0 - momentum) * o + momentum * b).collect()
}

impl BnLayer {
    /// Fresh layer: `mu = 0`, `sigma = sqrt(1 + eps)`, `gamma = 1`, `beta = 0`.
    pub fn new(channels: usize) -> Self {
        Self {
            mu: vec![0.0; channels],
            sigma: vec![libm::sqrt(1.0 + DEFAULT_EPSILON); channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            mode: BnMode::Eval,
            batch_blend: 1.0,
            lccs: None,
        }
    }

    /// Layer with explicit statistics and parameters; zero gamma entries are nudged.
    pub fn from_parts(mu: Vec<f64>, sigma: Vec<f64>, gamma: Vec<f64>, beta: Vec<f64>, epsilon: f64) -> Result<Self> {
        let c = mu.len();
        ensure!(c > 0, "BN layer needs at least one channel");
        ensure!(sigma.len() == c && gamma.len() == c && beta.len() == c, "BN vectors must all have {} entries", c);
        ensure!(epsilon >= 0.0, "epsilon must be nonnegative");
        if sigma.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::NumericDomain("BN sigma entries must be positive".into()));
        }
        let mut layer = Self { mu, sigma, gamma, beta, epsilon, ..Self::new(c) };
        layer.nudge_gamma();
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn nudge_gamma(&mut self) {
        for g in &mut self.gamma {
            if *g == 0.0 {
                *g = GAMMA_NUDGE;
            }
        }
    }

    /// Folds one batch into the running statistics: mean and variance are each
    /// blended by EMA, then `sigma = sqrt(var + eps)`.
    pub fn absorb_batch(&mut self, stats: &BatchStats) {
        self.mu = ema_update(&self.mu, &stats.mean, self.momentum);
        let running_var: Vec<f64> = self.sigma.iter().map(|s| (s * s - self.epsilon).max(0.0)).collect();
        let var = ema_update(&running_var, &stats.var, self.momentum);
        self.sigma = var.iter().map(|v| libm::sqrt(v + self.epsilon).max(libm::sqrt(self.epsilon))).collect();
        if self.sigma.contains(&0.0) {
            // epsilon == 0 and a dead channel; keep the layer usable in eval mode
            for s in &mut self.sigma {
                if *s == 0.0 {
                    *s = f64::MIN_POSITIVE;
                }
            }
        }
    }

    /// Places the layer on the tape. `index` identifies the layer in error messages.
    pub(crate) fn apply(
        &self,
        tape: &mut Tape,
        z: Var,
        index: usize,
        learn_affine: bool,
        learn_lccs: bool,
    ) -> Result<(BnVars, Option<BatchStats>)> {
        let shape = tape.value(z).shape().to_vec();
        ensure!(shape.len() == 2 || shape.len() == 4, "BN input must be rank 2 or 4, got {:?}", shape);
        ensure!(shape[0] > 0, "BN input has no samples");
        ensure!(
            shape[1] == self.channels(),
            "BN layer {} expects {} channels, got {}",
            index,
            self.channels(),
            shape[1]
        );
        let gamma = tape.leaf(Tensor::from_vec(self.gamma.clone()), learn_affine);
        let beta = tape.leaf(Tensor::from_vec(self.beta.clone()), learn_affine);
        let (mut eta, mut rho) = (None, None);
        let mut batch = None;
        let (mu, sigma) = match self.mode {
            BnMode::Eval => {
                (tape.constant(Tensor::from_vec(self.mu.clone())), tape.constant(Tensor::from_vec(self.sigma.clone())))
            }
            BnMode::Train | BnMode::TestTimeBn => {
                let per_channel: usize = shape[0] * shape[2..].iter().product::<usize>();
                if shape.len() == 2 && shape[0] == 1 || per_channel == 1 {
                    return Err(Error::DegenerateVariance { layer: index, samples: shape[0] });
                }
                let mean = tape.channel_mean(z)?;
                let centered = tape.channel_sub(z, mean)?;
                let sq = tape.square(centered)?;
                let var = tape.channel_mean(sq)?;
                let var_eps = tape.scalar(BinaryOp::Add, var, self.epsilon)?;
                let sd = tape.sqrt(var_eps)?;
                batch = Some(BatchStats {
                    mean: tape.value(mean).data().to_vec(),
                    var: tape.value(var).data().to_vec(),
                    sigma: tape.value(sd).data().to_vec(),
                });
                if self.mode == BnMode::TestTimeBn && self.batch_blend != 1.0 {
                    let b = self.batch_blend;
                    let blend = |tape: &mut Tape, batch_v: Var, stored: &[f64]| -> Result<Var> {
                        let stored = tape.constant(Tensor::from_vec(stored.iter().map(|s| (1.0 - b) * s).collect()));
                        let scaled = tape.scalar(BinaryOp::Mul, batch_v, b)?;
                        tape.add(scaled, stored)
                    };
                    let m = blend(tape, mean, &self.mu)?;
                    let s = blend(tape, sd, &self.sigma)?;
                    (m, s)
                } else {
                    (mean, sd)
                }
            }
            BnMode::Lccs => {
                let state = self.lccs.as_ref().ok_or_else(|| {
                    Error::Contract(alloc::format!("BN layer {} is in LCCS mode without LCCS state", index))
                })?;
                ensure!(
                    state.channels() == self.channels(),
                    "LCCS state of layer {} has {} channels, layer has {}",
                    index,
                    state.channels(),
                    self.channels()
                );
                let vars = state.stats_on_tape(tape, learn_lccs)?;
                eta = Some(vars.eta);
                rho = Some(vars.rho);
                (vars.mu, vars.sigma)
            }
        };
        let output = tape.bn_affine(z, mu, sigma, gamma, beta)?;
        Ok((BnVars { output, gamma, beta, eta, rho }, batch))
    }

    /// Stand-alone forward of a single tensor; in `Train` mode the running
    /// statistics are updated.
    pub fn forward(&mut self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (vars, batch) = self.apply(&mut tape, zv, 0, false, false)?;
        if self.mode == BnMode::Train {
            if let Some(stats) = &batch {
                self.absorb_batch(stats);
            }
        }
        Ok(tape.value(vars.output).clone())
    }
}

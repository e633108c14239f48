//! Few-shot BN adaptation by Linear Combination Coefficients for batch-norm
//! Statistics (LCCS).
//!
//! Each BN layer gets adapted statistics `μ = M η`, `σ = Σ ρ` where the first
//! column of `M` (`Σ`) is the source statistic and the remaining columns are
//! support-set spanning vectors. Adaptation runs in stages:
//!
//! 1. [`collect_support_stats`]: EMA of support batch statistics (`μ_spt`, `σ_spt`).
//! 2. [`grid_init`]: search `v` with `η = ρ = [1 − v, v]`, tied across layers.
//! 3. [`extract_spanning_vectors`]: SVD of per-sample statistics after
//!    projecting out `μ_spt` (`σ_spt`).
//! 4. [`gradient_adapt`]: untied optimization of every layer's `η, ρ` on
//!    support cross-entropy.
//! 5. [`freeze`]: bake the synthesized statistics into eval-mode BN layers.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::data::{derive_seed, rng, shuffled_indices, training_batches, Dataset};
use crate::error::{ensure, Error, Result};
use crate::network::{ema_update, BnMode, Model, ParamId, Trainable};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::svd::svd_thin;
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;
/// Epochs for both the statistic EMA and the gradient stage.
pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_EMA_MOMENTUM: f64 = 0.1;
/// Relative singular-value threshold below which residual directions are dropped.
const RANK_TOL: f64 = 1e-9;
/// Grid losses this close (relative) count as tied.
const TIE_TOL: f64 = 1e-12;

/// `v ∈ {0, 1/steps, …, 1}`.
pub fn default_grid(steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// `n = k·K` once there are at least 5 shots per class, `n = 1` otherwise.
pub fn default_n(k: usize, classes: usize) -> usize {
    if k >= 5 {
        k * classes
    } else {
        1
    }
}

/// Spanning matrices and coefficients of one BN layer. Matrices are row-major
/// `C × (n+1)`; column 0 holds the source statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct LccsLayerState {
    channels: usize,
    n: usize,
    pub m: Vec<f64>,
    pub sigma_mat: Vec<f64>,
    pub eta: Vec<f64>,
    pub rho: Vec<f64>,
    pub sigma_floor: f64,
}

pub(crate) struct LccsVars {
    pub mu: Var,
    pub sigma: Var,
    pub eta: Var,
    pub rho: Var,
}

impl LccsLayerState {
    pub fn new(
        channels: usize,
        m: Vec<f64>,
        sigma_mat: Vec<f64>,
        eta: Vec<f64>,
        rho: Vec<f64>,
        sigma_floor: f64,
    ) -> Result<Self> {
        ensure!(channels > 0, "LCCS state needs at least one channel");
        ensure!(eta.len() >= 2, "LCCS needs n >= 1 (at least two coefficients)");
        let cols = eta.len();
        ensure!(rho.len() == cols, "eta and rho lengths differ: {} vs {}", cols, rho.len());
        ensure!(
            m.len() == channels * cols && sigma_mat.len() == channels * cols,
            "spanning matrices must be {}x{}",
            channels,
            cols
        );
        ensure!(sigma_floor > 0.0, "sigma floor must be positive");
        if m.iter().chain(&sigma_mat).chain(&eta).chain(&rho).any(|x| !x.is_finite()) {
            return Err(Error::NumericDomain("non-finite LCCS state".into()));
        }
        Ok(Self { channels, n: cols - 1, m, sigma_mat, eta, rho, sigma_floor })
    }

    /// `n = 1` state `M = [μ_s | μ_spt]`, `η = ρ = [1 − v, v]`.
    pub fn tied(mu_s: &[f64], sigma_s: &[f64], mu_spt: &[f64], sigma_spt: &[f64], v: f64) -> Result<Self> {
        let c = mu_s.len();
        ensure!(
            sigma_s.len() == c && mu_spt.len() == c && sigma_spt.len() == c,
            "statistics must all have {} channels",
            c
        );
        let interleave = |a: &[f64], b: &[f64]| a.iter().zip(b).flat_map(|(&x, &y)| [x, y]).collect::<Vec<_>>();
        Self::new(
            c,
            interleave(mu_s, mu_spt),
            interleave(sigma_s, sigma_spt),
            vec![1.0 - v, v],
            vec![1.0 - v, v],
            DEFAULT_SIGMA_FLOOR,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of support spanning vectors.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m_column(&self, j: usize) -> Vec<f64> {
        let cols = self.n + 1;
        (0..self.channels).map(|i| self.m[i * cols + j]).collect()
    }

    pub fn sigma_column(&self, j: usize) -> Vec<f64> {
        let cols = self.n + 1;
        (0..self.channels).map(|i| self.sigma_mat[i * cols + j]).collect()
    }

    /// `(M η, max(Σ ρ, floor))`, with the same summation order as the tape path.
    pub fn lccs_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let cols = self.n + 1;
        let combine = |mat: &[f64], coef: &[f64]| -> Vec<f64> {
            (0..self.channels)
                .map(|i| {
                    let mut acc = 0.0;
                    for p in 0..cols {
                        acc += mat[i * cols + p] * coef[p];
                    }
                    acc
                })
                .collect()
        };
        let mu = combine(&self.m, &self.eta);
        let sigma = combine(&self.sigma_mat, &self.rho)
            .into_iter()
            .map(|s| if s > self.sigma_floor { s } else { self.sigma_floor })
            .collect();
        (mu, sigma)
    }

    pub(crate) fn stats_on_tape(&self, tape: &mut Tape, learn: bool) -> Result<LccsVars> {
        let (c, cols) = (self.channels, self.n + 1);
        let m = tape.constant(Tensor::from_parts(vec![c, cols], self.m.clone()));
        let s = tape.constant(Tensor::from_parts(vec![c, cols], self.sigma_mat.clone()));
        let eta = tape.leaf(Tensor::from_parts(vec![cols, 1], self.eta.clone()), learn);
        let rho = tape.leaf(Tensor::from_parts(vec![cols, 1], self.rho.clone()), learn);
        let mu = tape.matmul(m, eta)?;
        let mu = tape.reshape(mu, &[c])?;
        let sigma = tape.matmul(s, rho)?;
        let sigma = tape.reshape(sigma, &[c])?;
        let sigma = tape.max_scalar(sigma, self.sigma_floor)?;
        Ok(LccsVars { mu, sigma, eta, rho })
    }
}

/// `k` labeled target samples per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub data: Dataset,
    /// Indices into the dataset the support was drawn from.
    pub indices: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.data.classes
    }
}

/// Support statistics of one BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsConfig {
    pub epochs: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { epochs: DEFAULT_EPOCHS, momentum: DEFAULT_EMA_MOMENTUM, batch_size: 32, seed: 0 }
    }
}

/// EMA of per-batch BN statistics over `epochs` passes of `data`, starting from
/// the model's stored statistics. Every BN layer normalizes with the current
/// batch's statistics; the model itself is not modified.
pub fn collect_batch_stats(model: &Model, data: &Dataset, cfg: &StatsConfig) -> Result<Vec<LayerStats>> {
    ensure!(!data.is_empty(), "statistics need at least one sample");
    ensure!(!model.bn_indices().is_empty(), "model has no BN layers");
    ensure!((0.0..=1.0).contains(&cfg.momentum), "momentum must lie in [0, 1]");
    let mut probe = model.clone();
    probe.set_bn_mode(BnMode::TestTimeBn);
    let mut stats: Vec<LayerStats> = model
        .bn_indices()
        .into_iter()
        .map(|i| {
            let bn = model.bn(i).expect("bn index");
            LayerStats { layer: i, mu: bn.mu.clone(), sigma: bn.sigma.clone() }
        })
        .collect();
    let mut order_rng = rng(derive_seed(cfg.seed, 0x0065_6d61));
    for _ in 0..cfg.epochs {
        let order = shuffled_indices(data.len(), &mut order_rng);
        for range in training_batches(data.len(), cfg.batch_size) {
            let x = data.inputs.gather_rows(&order[range])?;
            let fwd = probe.forward(&x, Trainable::NONE)?;
            for (slot, trace) in stats.iter_mut().zip(&fwd.bn) {
                let batch = trace.batch.as_ref().expect("test-time BN records batch statistics");
                slot.mu = ema_update(&slot.mu, &batch.mean, cfg.momentum);
                slot.sigma = ema_update(&slot.sigma, &batch.sigma, cfg.momentum);
            }
        }
    }
    Ok(stats)
}

/// Support BN statistics `(μ_spt, σ_spt)` for every BN layer.
pub fn collect_support_stats(model: &Model, support: &SupportSet, cfg: &StatsConfig) -> Result<Vec<LayerStats>> {
    collect_batch_stats(model, &support.data, cfg)
}

/// Mean support cross-entropy with the model as configured (no gradients).
pub fn support_loss(model: &Model, data: &Dataset) -> Result<f64> {
    let mut fwd = model.forward(&data.inputs, Trainable::NONE)?;
    let loss = fwd.tape.cross_entropy(fwd.logits, &data.labels)?;
    Ok(fwd.tape.value(loss).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// One `v` shared by every BN layer.
    Tied,
    /// Layer by layer from the shallowest, each searched with earlier layers fixed.
    Greedy,
}

#[derive(Debug, Clone)]
pub struct GridInit {
    /// Chosen `v` per BN layer (all equal for the tied strategy).
    pub per_layer_v: Vec<f64>,
    /// `(v, loss)` for every evaluated grid point of the tied search (or the
    /// last layer searched, for the greedy strategy).
    pub losses: Vec<(f64, f64)>,
    /// Model with every BN layer in LCCS mode holding its initialized `n = 1` state.
    pub model: Model,
}

impl GridInit {
    pub fn v_star(&self) -> f64 {
        self.per_layer_v.first().copied().unwrap_or(0.0)
    }
}

fn grid_loss(model: &Model, support: &SupportSet, stats: &[LayerStats], vs: &[f64]) -> Result<f64> {
    let loss = support_loss(&with_layer_vs(model, stats, vs)?, &support.data)?;
    if !loss.is_finite() {
        return Err(Error::NumericDomain(alloc::format!("support loss is not finite at v = {vs:?}")));
    }
    Ok(loss)
}

fn with_layer_vs(model: &Model, stats: &[LayerStats], vs: &[f64]) -> Result<Model> {
    let mut out = model.clone();
    for (s, &v) in stats.iter().zip(vs) {
        let bn = out.bn_mut(s.layer).ok_or_else(|| Error::Contract(alloc::format!("layer {} is not BN", s.layer)))?;
        bn.lccs = Some(LccsLayerState::tied(&bn.mu, &bn.sigma, &s.mu, &s.sigma, v)?);
        bn.mode = BnMode::Lccs;
    }
    Ok(out)
}

/// Smallest-loss grid point; ties (within rounding) go to the smaller `v`.
fn best_of(losses: &[(f64, f64)]) -> f64 {
    let min = losses.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let band = TIE_TOL * min.abs().max(1.0);
    losses.iter().filter(|p| p.1 <= min + band).map(|p| p.0).fold(f64::INFINITY, f64::min)
}

/// Grid search over `v` with `η = ρ = [1 − v, v]`; `stats` are the support statistics.
pub fn grid_init(
    model: &Model,
    support: &SupportSet,
    stats: &[LayerStats],
    grid: &[f64],
    strategy: InitStrategy,
) -> Result<GridInit> {
    ensure!(!grid.is_empty(), "grid must contain at least one value");
    ensure!(stats.len() == model.bn_indices().len(), "need statistics for every BN layer");
    let layers = stats.len();
    match strategy {
        InitStrategy::Tied => {
            let mut losses = Vec::with_capacity(grid.len());
            for &v in grid {
                losses.push((v, grid_loss(model, support, stats, &vec![v; layers])?));
            }
            let v = best_of(&losses);
            let model = with_layer_vs(model, stats, &vec![v; layers])?;
            Ok(GridInit { per_layer_v: vec![v; layers], losses, model })
        }
        InitStrategy::Greedy => {
            let mut vs = vec![0.0; layers];
            let mut losses = Vec::new();
            for l in 0..layers {
                losses.clear();
                for &v in grid {
                    vs[l] = v;
                    losses.push((v, grid_loss(model, support, stats, &vs)?));
                }
                vs[l] = best_of(&losses);
            }
            let model = with_layer_vs(model, stats, &vs)?;
            Ok(GridInit { per_layer_v: vs, losses, model })
        }
    }
}

/// Support spanning vectors of one BN layer, row-major `C × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spanning {
    pub layer: usize,
    pub channels: usize,
    /// Columns: `μ_spt`, then the top residual directions scaled by their singular values.
    pub m_spt: Vec<f64>,
    pub sigma_spt: Vec<f64>,
    /// Effective number of support spanning vectors (columns of `m_spt`).
    pub n_eff: usize,
}

/// Per-sample channel means and standard deviations (`sqrt(var + eps)`) of a
/// rank-4 `(N, C, H, W)` input, each returned as a row-major `C × N` matrix.
pub fn per_sample_stats(z: &Tensor, epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure!(z.rank() == 4, "per-sample statistics need a rank-4 input");
    let (n, c) = (z.shape()[0], z.shape()[1]);
    let s = z.shape()[2] * z.shape()[3];
    let d = z.data();
    let mut means = vec![0.0; c * n];
    let mut sds = vec![0.0; c * n];
    for b in 0..n {
        for ch in 0..c {
            let vals = &d[(b * c + ch) * s..(b * c + ch + 1) * s];
            let mean = vals.iter().sum::<f64>() / s as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s as f64;
            means[ch * n + b] = mean;
            sds[ch * n + b] = libm::sqrt(var + epsilon);
        }
    }
    Ok((means, sds))
}

/// `(I − u uᵀ/‖u‖²) Z` for a row-major `C × N` matrix `Z`; unchanged when `u = 0`.
pub fn project_out(z: &[f64], u: &[f64], n: usize) -> Vec<f64> {
    let c = u.len();
    let norm2: f64 = u.iter().map(|x| x * x).sum();
    let mut out = z.to_vec();
    if norm2 == 0.0 {
        return out;
    }
    for j in 0..n {
        let dot: f64 = (0..c).map(|i| z[i * n + j] * u[i]).sum();
        for i in 0..c {
            out[i * n + j] -= dot * u[i] / norm2;
        }
    }
    out
}

/// Top `wanted` columns of `U·diag(S)` of the residual, limited to its numerical rank.
fn residual_directions(residual: &[f64], c: usize, n: usize, wanted: usize) -> Result<Vec<Vec<f64>>> {
    if wanted == 0 {
        return Ok(Vec::new());
    }
    let svd = svd_thin(residual, c, n)?;
    let keep = wanted.min(svd.numerical_rank(RANK_TOL));
    Ok((0..keep).map(|j| svd.u_col(j).into_iter().map(|x| x * svd.s[j]).collect()).collect())
}

fn columns_to_matrix(cols: &[Vec<f64>], c: usize) -> Vec<f64> {
    let k = cols.len();
    let mut out = vec![0.0; c * k];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..c {
            out[i * k + j] = col[i];
        }
    }
    out
}

/// Spanning vectors for every BN layer from one forward pass of the support set
/// through `model_with_init`. Rank-2 BN layers and single-sample supports keep
/// only `μ_spt`/`σ_spt` (`n = 1`).
pub fn extract_spanning_vectors(
    model_with_init: &Model,
    support: &SupportSet,
    stats: &[LayerStats],
    n: usize,
) -> Result<Vec<Spanning>> {
    ensure!(n >= 1, "spanning-vector count n must be at least 1");
    ensure!(!support.is_empty(), "support set is empty");
    ensure!(stats.len() == model_with_init.bn_indices().len(), "need statistics for every BN layer");
    let fwd = model_with_init.forward(&support.data.inputs, Trainable::NONE)?;
    let samples = support.len();
    let mut out = Vec::with_capacity(stats.len());
    for (s, trace) in stats.iter().zip(&fwd.bn) {
        let c = s.mu.len();
        let z = fwd.tape.value(trace.input);
        let (mut mu_cols, mut sigma_cols) = (vec![s.mu.clone()], vec![s.sigma.clone()]);
        if z.rank() == 4 && n > 1 && samples > 1 {
            let eps = model_with_init.bn(s.layer).map_or(0.0, |b| b.epsilon);
            let (means, sds) = per_sample_stats(z, eps)?;
            let mu_dirs = residual_directions(&project_out(&means, &s.mu, samples), c, samples, n - 1)?;
            let sigma_dirs = residual_directions(&project_out(&sds, &s.sigma, samples), c, samples, n - 1)?;
            let extra = mu_dirs.len().max(sigma_dirs.len());
            mu_cols.extend(mu_dirs);
            sigma_cols.extend(sigma_dirs);
            // Pad the shorter family with zero columns so both share one n.
            mu_cols.resize(extra + 1, vec![0.0; c]);
            sigma_cols.resize(extra + 1, vec![0.0; c]);
        }
        out.push(Spanning {
            layer: s.layer,
            channels: c,
            n_eff: mu_cols.len(),
            m_spt: columns_to_matrix(&mu_cols, c),
            sigma_spt: columns_to_matrix(&sigma_cols, c),
        });
    }
    Ok(out)
}

/// Replaces each layer's state with `M = [μ_s | M_spt]`, `Σ = [σ_s | Σ_spt]`,
/// carrying over the initialized `[1 − v, v]` and zero for the new coefficients.
pub fn install_spanning_vectors(model: &mut Model, spans: &[Spanning], sigma_floor: f64) -> Result<()> {
    for span in spans {
        let bn = model
            .bn_mut(span.layer)
            .ok_or_else(|| Error::Contract(alloc::format!("layer {} is not BN", span.layer)))?;
        let (eta0, rho0) = match &bn.lccs {
            Some(state) => ((state.eta[0], state.eta[1]), (state.rho[0], state.rho[1])),
            None => ((1.0, 0.0), (1.0, 0.0)),
        };
        let c = span.channels;
        let cols = span.n_eff + 1;
        let mut m = vec![0.0; c * cols];
        let mut s = vec![0.0; c * cols];
        for i in 0..c {
            m[i * cols] = bn.mu[i];
            s[i * cols] = bn.sigma[i];
            for j in 0..span.n_eff {
                m[i * cols + j + 1] = span.m_spt[i * span.n_eff + j];
                s[i * cols + j + 1] = span.sigma_spt[i * span.n_eff + j];
            }
        }
        let mut eta = vec![0.0; cols];
        let mut rho = vec![0.0; cols];
        (eta[0], eta[1]) = eta0;
        (rho[0], rho[1]) = rho0;
        bn.lccs = Some(LccsLayerState::new(c, m, s, eta, rho, sigma_floor)?);
        bn.mode = BnMode::Lccs;
    }
    Ok(())
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &mut [f64]) {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// Project every `η` and `ρ` onto the simplex after each step.
    pub convex: bool,
    /// Additive Gaussian jitter applied to support inputs.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self { epochs: DEFAULT_EPOCHS, optimizer: OptimizerConfig::adam(1e-3), convex: false, jitter: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradientOutcome {
    pub model: Model,
    /// Full-support loss before the first epoch and after each epoch.
    pub loss_curve: Vec<f64>,
}

/// Runs one epoch of coefficient updates in place.
pub fn gradient_epoch(
    model: &mut Model,
    support: &SupportSet,
    cfg: &GradientConfig,
    opt: &mut Optimizer<ParamId>,
    order_rng: &mut rand_chacha::ChaCha8Rng,
    noise_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    let data = &support.data;
    let order = shuffled_indices(data.len(), order_rng);
    for range in training_batches(data.len(), cfg.optimizer.batch_size) {
        let idx = &order[range];
        let mut x = data.inputs.gather_rows(idx)?;
        crate::network::jitter_inputs(&mut x, cfg.jitter, noise_rng);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut fwd = model.forward(&x, Trainable::LCCS)?;
        let loss = fwd.tape.cross_entropy(fwd.logits, &labels)?;
        fwd.tape.backward(loss)?;
        for (id, grad) in fwd.param_grads() {
            if let Some(p) = model.param_mut(id) {
                opt.update(&id, p, &grad);
                if cfg.convex {
                    project_to_simplex(p);
                }
            }
        }
    }
    Ok(())
}

/// Untied gradient optimization of all layers' `η, ρ` on support cross-entropy.
/// Every other parameter is frozen. Layers must already hold LCCS states.
pub fn gradient_adapt(model: &Model, support: &SupportSet, cfg: &GradientConfig) -> Result<GradientOutcome> {
    ensure!(!support.is_empty(), "support set is empty");
    for i in model.bn_indices() {
        let bn = model.bn(i).expect("bn index");
        ensure!(bn.mode == BnMode::Lccs && bn.lccs.is_some(), "BN layer {} has no initialized LCCS state", i);
    }
    let mut model = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order_rng = rng(derive_seed(cfg.seed, 0x6772_6164));
    let mut noise_rng = rng(derive_seed(cfg.seed, 0x6e6f_6973));
    let mut loss_curve = vec![support_loss(&model, &support.data)?];
    for _ in 0..cfg.epochs {
        gradient_epoch(&mut model, support, cfg, &mut opt, &mut order_rng, &mut noise_rng)?;
        loss_curve.push(support_loss(&model, &support.data)?);
    }
    Ok(GradientOutcome { model, loss_curve })
}

/// Bakes each LCCS layer's synthesized statistics into its stored statistics and
/// switches every BN layer to eval mode. The LCCS state is kept as a record.
pub fn freeze(model: &Model) -> Model {
    let mut out = model.clone();
    for bn in out.bn_layers_mut() {
        if bn.mode == BnMode::Lccs {
            if let Some(state) = &bn.lccs {
                let (mu, sigma) = state.lccs_stats();
                bn.mu = mu;
                bn.sigma = sigma;
            }
        }
        bn.mode = BnMode::Eval;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LccsConfig {
    /// Requested spanning-vector count.
    pub n: usize,
    pub stats: StatsConfig,
    pub grid: Vec<f64>,
    pub init: InitStrategy,
    /// Run the grid-search stage (otherwise start from `v = 0`).
    pub init_stage: bool,
    /// Run the gradient stage.
    pub gradient_stage: bool,
    pub gradient: GradientConfig,
    pub sigma_floor: f64,
}

impl Default for LccsConfig {
    fn default() -> Self {
        Self {
            n: 1,
            stats: StatsConfig::default(),
            grid: default_grid(10),
            init: InitStrategy::Tied,
            init_stage: true,
            gradient_stage: true,
            gradient: GradientConfig::default(),
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LccsOutcome {
    /// Frozen, eval-pure adapted model.
    pub model: Model,
    pub per_layer_v: Vec<f64>,
    pub grid_losses: Vec<(f64, f64)>,
    pub n_requested: usize,
    /// Effective spanning-vector count per BN layer.
    pub n_effective: Vec<usize>,
    pub loss_curve: Vec<f64>,
}

impl LccsOutcome {
    pub fn v_star(&self) -> f64 {
        self.per_layer_v.first().copied().unwrap_or(0.0)
    }
}

/// The full pipeline: statistics, initialization, spanning vectors, gradient
/// stage and freeze.
pub fn adapt(model: &Model, support: &SupportSet, cfg: &LccsConfig) -> Result<LccsOutcome> {
    ensure!(cfg.n >= 1, "spanning-vector count n must be at least 1");
    let stats = collect_support_stats(model, support, &cfg.stats)?;
    let grid = if cfg.init_stage { cfg.grid.clone() } else { vec![0.0] };
    let init = grid_init(model, support, &stats, &grid, cfg.init)?;
    let spans = extract_spanning_vectors(&init.model, support, &stats, cfg.n)?;
    let mut adapted = init.model.clone();
    install_spanning_vectors(&mut adapted, &spans, cfg.sigma_floor)?;
    let mut loss_curve = Vec::new();
    if cfg.gradient_stage {
        let out = gradient_adapt(&adapted, support, &cfg.gradient)?;
        adapted = out.model;
        loss_curve = out.loss_curve;
    }
    Ok(LccsOutcome {
        model: freeze(&adapted),
        per_layer_v: init.per_layer_v,
        grid_losses: init.losses,
        n_requested: cfg.n,
        n_effective: spans.iter().map(|s| s.n_eff).collect(),
        loss_curve,
    })
}

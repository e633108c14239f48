//! Seeded synthetic domains and test-stream construction.
//!
//! Samples are drawn in a small latent space (one Gaussian per class), rendered
//! to `(C₀, H, W)` images through a fixed random linear map, and then shifted
//! per input channel: `x_target = c · x + s_channel`. Because the first layer
//! is a bias-free convolution and the scale is shared by all input channels,
//! the shift reaches the first BN layer as a pure per-channel affine change of
//! its input, which BN statistics can undo exactly.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{derive_seed, rng, Dataset};
use crate::error::{ensure, Result};
use crate::lccs::SupportSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub classes: usize,
    /// `(C₀, H, W)`.
    pub image_shape: [usize; 3],
    pub latent_dim: usize,
    /// Scale of the random class means in latent space.
    pub class_separation: f64,
    pub latent_noise: f64,
    pub pixel_noise: f64,
    /// Seeds the class means, the rendering map and the warp; shared by all
    /// domains of one task.
    pub task_seed: u64,
    /// Per-input-channel additive shift.
    pub shift: Vec<f64>,
    /// Multiplicative scale shared by all input channels.
    pub scale: f64,
    /// Strength of the nonlinear latent warp (0 disables it).
    pub warp: f64,
}

impl DomainSpec {
    /// Unshifted domain with `K` classes and 3×8×8 images.
    pub fn source(classes: usize, task_seed: u64) -> Self {
        Self {
            classes,
            image_shape: [3, 8, 8],
            latent_dim: 8,
            class_separation: 1.2,
            latent_noise: 0.35,
            pixel_noise: 0.1,
            task_seed,
            shift: vec![0.0; 3],
            scale: 1.0,
            warp: 0.0,
        }
    }

    pub fn with_shift(mut self, shift: Vec<f64>, scale: f64) -> Self {
        self.shift = shift;
        self.scale = scale;
        self
    }

    pub fn with_warp(mut self, warp: f64) -> Self {
        self.warp = warp;
        self
    }

    /// `(source, target)` differing only by an exactly BN-correctable moment shift.
    pub fn moment_shift(task_seed: u64) -> (Self, Self) {
        let source = Self::source(7, task_seed);
        let target = source.clone().with_shift(vec![1.5, -1.2, 0.9], 2.5);
        (source, target)
    }

    /// Like [`DomainSpec::moment_shift`] plus a mild latent warp in the target.
    pub fn warped_shift(task_seed: u64) -> (Self, Self) {
        let (source, target) = Self::moment_shift(task_seed);
        (source, target.with_warp(0.3))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.classes >= 2, "need at least two classes");
        ensure!(self.image_shape.iter().all(|&d| d > 0), "image extents must be positive");
        ensure!(self.latent_dim > 0, "latent dimension must be positive");
        ensure!(self.scale > 0.0 && self.scale.is_finite(), "scale must be positive");
        ensure!(
            self.shift.len() == self.image_shape[0],
            "shift has {} entries for {} channels",
            self.shift.len(),
            self.image_shape[0]
        );
        ensure!(self.latent_noise >= 0.0 && self.pixel_noise >= 0.0, "noise levels must be nonnegative");
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.image_shape.iter().product()
    }
}

/// Task-level fixed randomness: class means, rendering map, warp map.
struct Task {
    means: Vec<f64>,
    render: Vec<f64>,
    warp: Vec<f64>,
}

impl Task {
    fn new(spec: &DomainSpec) -> Self {
        let l = spec.latent_dim;
        let mut r = rng(derive_seed(spec.task_seed, 0x7461_736b));
        let mut normal = move |n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect()
        };
        let means = normal(spec.classes * l, spec.class_separation);
        // Unit-variance pixels before noise.
        let latent_var = spec.class_separation * spec.class_separation + spec.latent_noise * spec.latent_noise;
        let render = normal(spec.pixels() * l, libm::sqrt(1.0 / (l as f64 * latent_var)));
        let warp = normal(l * l, libm::sqrt(1.0 / l as f64));
        Self { means, render, warp }
    }
}

/// `size` labeled samples, labels cycling `0, 1, …, K−1`.
pub fn gen_dataset(spec: &DomainSpec, size: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    ensure!(size >= spec.classes, "dataset size {} below class count {}", size, spec.classes);
    let task = Task::new(spec);
    let (l, p) = (spec.latent_dim, spec.pixels());
    let spatial = spec.image_shape[1] * spec.image_shape[2];
    let mut r = rng(derive_seed(seed, 0x6461_7461));
    let mut data = Vec::with_capacity(size * p);
    let mut labels = Vec::with_capacity(size);
    let mut z = vec![0.0; l];
    for i in 0..size {
        let y = i % spec.classes;
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = task.means[y * l + j] + spec.latent_noise * r.sample::<f64, _>(StandardNormal);
        }
        if spec.warp != 0.0 {
            let warped: Vec<f64> = (0..l)
                .map(|j| {
                    let a: f64 = (0..l).map(|q| task.warp[j * l + q] * z[q]).sum();
                    z[j] + spec.warp * libm::sin(2.0 * a)
                })
                .collect();
            z = warped;
        }
        for px in 0..p {
            let clean: f64 = (0..l).map(|j| task.render[px * l + j] * z[j]).sum();
            let x = clean + spec.pixel_noise * r.sample::<f64, _>(StandardNormal);
            data.push(spec.scale * x + spec.shift[px / spatial]);
        }
        labels.push(y);
    }
    let [c, h, w] = spec.image_shape;
    Dataset::new(Tensor::new(&[size, c, h, w], data)?, labels, spec.classes)
}

/// `k` samples per class drawn uniformly without replacement; indices are
/// grouped by class.
pub fn sample_support(dataset: &Dataset, k: usize, seed: u64) -> Result<SupportSet> {
    ensure!(k >= 1, "k must be at least 1");
    let mut r = rng(derive_seed(seed, 0x0073_7074));
    let mut indices = Vec::with_capacity(k * dataset.classes);
    for (class, mut members) in dataset.class_indices().into_iter().enumerate() {
        ensure!(members.len() >= k, "class {} has {} samples, support needs {}", class, members.len(), k);
        let (chosen, _) = members.partial_shuffle(&mut r, k);
        indices.extend_from_slice(chosen);
    }
    Ok(SupportSet { data: dataset.subset(&indices)?, indices, k, seed })
}

/// Class sizes `round_half_up(n_max · α^(−c/(K−1)))`, at least 1.
pub fn longtail_sizes(classes: usize, alpha: f64, n_max: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| {
            let exponent = if classes > 1 { -(c as f64) / (classes - 1) as f64 } else { 0.0 };
            let size = libm::floor(n_max as f64 * libm::pow(alpha, exponent) + 0.5) as usize;
            size.max(1)
        })
        .collect()
}

/// Indices of an exponentially imbalanced subset, in dataset order.
pub fn make_longtail(dataset: &Dataset, alpha: f64, n_max: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(alpha >= 1.0 && alpha.is_finite(), "imbalance ratio must be at least 1, got {}", alpha);
    let members = dataset.class_indices();
    let smallest = members.iter().map(Vec::len).min().unwrap_or(0);
    ensure!(n_max >= 1 && n_max <= smallest, "n_max {} must lie in [1, {}]", n_max, smallest);
    let mut r = rng(derive_seed(seed, 0x7461_696c));
    let mut keep = Vec::new();
    for (mut class, size) in members.into_iter().zip(longtail_sizes(dataset.classes, alpha, n_max)) {
        let (chosen, _) = class.partial_shuffle(&mut r, size);
        keep.extend_from_slice(chosen);
    }
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StreamOrder {
    Shuffled,
    ByClass,
}

impl StreamOrder {
    pub fn name(self) -> &'static str {
        match self {
            StreamOrder::Shuffled => "shuffled",
            StreamOrder::ByClass => "by-class",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamPolicy {
    pub batch_size: usize,
    pub order: StreamOrder,
    /// Largest-to-smallest class ratio; 1 keeps every class whole.
    pub alpha: f64,
    pub seed: u64,
}

impl StreamPolicy {
    pub fn new(batch_size: usize, order: StreamOrder, alpha: f64, seed: u64) -> Self {
        Self { batch_size, order, alpha, seed }
    }
}

/// Orders `labels` (a dataset or subset) and partitions it into consecutive
/// batches of `batch_size` (the last may be short). Returns positions into `labels`.
pub fn make_stream(labels: &[usize], policy: &StreamPolicy) -> Result<Vec<Vec<usize>>> {
    ensure!(!labels.is_empty(), "stream needs at least one sample");
    ensure!(policy.batch_size >= 1, "stream batch size must be at least 1");
    let mut r = rng(derive_seed(policy.seed, 0x7374_726d));
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut r);
    if policy.order == StreamOrder::ByClass {
        // stable: within-class order stays the seeded permutation
        order.sort_by_key(|&i| labels[i]);
    }
    Ok(order.chunks(policy.batch_size).map(<[usize]>::to_vec).collect())
}

/// Applies the policy's imbalance to `dataset` and builds its stream. Returned
/// batches hold dataset indices.
pub fn policy_stream(dataset: &Dataset, policy: &StreamPolicy) -> Result<Vec<Vec<usize>>> {
    let subset: Vec<usize> = if policy.alpha == 1.0 {
        (0..dataset.len()).collect()
    } else {
        let smallest = dataset.class_counts().into_iter().min().unwrap_or(0);
        make_longtail(dataset, policy.alpha, smallest, policy.seed)?
    };
    let labels: Vec<usize> = subset.iter().map(|&i| dataset.labels[i]).collect();
    let batches = make_stream(&labels, policy)?;
    Ok(batches.into_iter().map(|b| b.into_iter().map(|p| subset[p]).collect()).collect())
}

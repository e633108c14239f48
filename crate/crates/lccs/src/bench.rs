//! Wall-clock cost of one gradient-stage epoch as a function of `n`.

use std::time::{Duration, Instant};

use lccs_core::data::{derive_seed, rng};
use lccs_core::lccs::{
    collect_support_stats, extract_spanning_vectors, gradient_epoch, grid_init, install_spanning_vectors,
    GradientConfig, InitStrategy, StatsConfig, SupportSet, DEFAULT_SIGMA_FLOOR,
};
use lccs_core::network::Model;
use lccs_core::optim::Optimizer;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochTiming {
    pub n: usize,
    /// Largest effective spanning-vector count over the BN layers.
    pub n_effective: usize,
    pub min_secs: f64,
    pub median_secs: f64,
}

/// Times `reps` gradient epochs for every `n`, interleaving the values of `n`
/// so slow drifts in machine load affect all of them alike.
pub fn bench_epoch_time(
    model: &Model,
    support: &SupportSet,
    ns: &[usize],
    reps: usize,
    cfg: &GradientConfig,
) -> lccs_core::Result<Vec<EpochTiming>> {
    let stats = collect_support_stats(model, support, &StatsConfig { seed: cfg.seed, ..StatsConfig::default() })?;
    let init = grid_init(model, support, &stats, &[0.5], InitStrategy::Tied)?;
    let mut prepared = Vec::with_capacity(ns.len());
    for &n in ns {
        let spans = extract_spanning_vectors(&init.model, support, &stats, n)?;
        let mut m = init.model.clone();
        install_spanning_vectors(&mut m, &spans, DEFAULT_SIGMA_FLOOR)?;
        prepared.push((m, spans.iter().map(|s| s.n_eff).max().unwrap_or(1)));
    }
    let mut samples: Vec<Vec<Duration>> = vec![Vec::with_capacity(reps); ns.len()];
    for rep in 0..reps.max(1) {
        for (slot, (m, _)) in prepared.iter().enumerate() {
            let mut m = m.clone();
            let mut opt = Optimizer::new(cfg.optimizer);
            let mut order_rng = rng(derive_seed(cfg.seed, rep as u64));
            let mut noise_rng = rng(derive_seed(cfg.seed, !(rep as u64)));
            let started = Instant::now();
            gradient_epoch(&mut m, support, cfg, &mut opt, &mut order_rng, &mut noise_rng)?;
            samples[slot].push(started.elapsed());
        }
    }
    Ok(ns
        .iter()
        .zip(prepared)
        .zip(samples)
        .map(|((&n, (_, n_effective)), mut d)| {
            d.sort();
            EpochTiming { n, n_effective, min_secs: d[0].as_secs_f64(), median_secs: d[d.len() / 2].as_secs_f64() }
        })
        .collect())
}

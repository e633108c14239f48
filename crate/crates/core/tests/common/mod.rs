#![allow(dead_code)]

use std::sync::OnceLock;

use lccs_core::data::Dataset;
use lccs_core::lccs::{collect_support_stats, LayerStats, LccsConfig, LccsOutcome, SupportSet};
use lccs_core::network::{train_source, BnMode, Model, TrainConfig};
use lccs_core::synth::{gen_dataset, DomainSpec};

pub struct Fixture {
    pub source: Model,
    pub source_test: Dataset,
    pub target_pool: Dataset,
    pub target_test: Dataset,
}

/// A reference conv net trained on the moment-shift source domain.
pub fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let (src, tgt) = DomainSpec::moment_shift(11);
        let train = gen_dataset(&src, 420, 1).unwrap();
        let model = Model::reference_conv(&[3, 8, 8], src.classes, 5).unwrap();
        let source =
            train_source(model, &train, &TrainConfig { epochs: 8, seed: 5, ..TrainConfig::default() }).unwrap();
        Fixture {
            source,
            source_test: gen_dataset(&src, 210, 2).unwrap(),
            target_pool: gen_dataset(&tgt, 350, 3).unwrap(),
            target_test: gen_dataset(&tgt, 210, 4).unwrap(),
        }
    })
}

pub fn accuracy(model: &Model, data: &Dataset) -> f64 {
    let p = model.predict_chunked(&data.inputs, 128).unwrap();
    p.iter().zip(&data.labels).filter(|(a, b)| a == b).count() as f64 / data.len() as f64
}

/// Mean cross-entropy from logits, computed with a max-shifted log-sum-exp.
pub fn mean_cross_entropy(logits: &[f64], labels: &[usize]) -> f64 {
    let k = logits.len() / labels.len();
    let total: f64 = logits
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Support loss with every BN layer in eval mode holding `(1 − v)·source + v·support`.
pub fn brute_force_grid(model: &Model, support: &SupportSet, stats: &[LayerStats], grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&v| {
            let mut m = model.clone();
            for s in stats {
                let bn = m.bn_mut(s.layer).unwrap();
                bn.mu = bn.mu.iter().zip(&s.mu).map(|(a, b)| (1.0 - v) * a + v * b).collect();
                bn.sigma = bn.sigma.iter().zip(&s.sigma).map(|(a, b)| (1.0 - v) * a + v * b).collect();
                bn.lccs = None;
                bn.mode = BnMode::Eval;
            }
            let logits = m.logits(&support.data.inputs).unwrap();
            mean_cross_entropy(logits.data(), &support.data.labels)
        })
        .collect()
}

/// Asserts the chosen `v*` of a tied-init adaptation run attains the brute-force grid minimum.
pub fn assert_grid_optimal(model: &Model, support: &SupportSet, cfg: &LccsConfig, outcome: &LccsOutcome) {
    let stats = collect_support_stats(model, support, &cfg.stats).unwrap();
    let losses = brute_force_grid(model, support, &stats, &cfg.grid);
    let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let chosen = cfg.grid.iter().position(|&v| v == outcome.v_star()).expect("v* lies on the grid");
    assert!(
        losses[chosen] <= best + 1e-10 * best.abs().max(1.0),
        "v* = {} has loss {} but the grid minimum is {best}",
        outcome.v_star(),
        losses[chosen]
    );
}

/// Least-squares residual norm of `b` against the span of `cols` (modified Gram-Schmidt).
pub fn span_residual(cols: &[Vec<f64>], b: &[f64]) -> f64 {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let scale = cols.iter().map(|c| norm(c)).fold(0.0, f64::max);
    for c in cols {
        let mut q = c.clone();
        for _ in 0..2 {
            for e in &basis {
                let d = dot(&q, e);
                q.iter_mut().zip(e).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = norm(&q);
        if n > 1e-12 * scale.max(1e-300) {
            basis.push(q.iter().map(|x| x / n).collect());
        }
    }
    let mut r = b.to_vec();
    for _ in 0..2 {
        for e in &basis {
            let d = dot(&r, e);
            r.iter_mut().zip(e).for_each(|(x, y)| *x -= d * y);
        }
    }
    norm(&r)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

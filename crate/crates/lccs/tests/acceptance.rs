//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line prints even when an earlier
//! criterion fails; the process exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use lccs::bench::bench_epoch_time;
use lccs::config::{ExperimentConfig, Preset};
use lccs::harness::{
    evaluate, lccs_config, make_data, make_source_model, render_report, run_experiment, without_timing, Adapted,
    ReportFormat, SeedData,
};
use lccs_core::baselines::{adabn_adapt, build_ncc_head, tent_eval, testtime_bn_eval, OnlineOutcome};
use lccs_core::data::{derive_seed, rng, Dataset};
use lccs_core::lccs::{
    adapt, collect_support_stats, default_grid, extract_spanning_vectors, grid_init, install_spanning_vectors,
    per_sample_stats, project_out, InitStrategy, LayerStats, LccsConfig, LccsLayerState, LccsOutcome, StatsConfig,
    SupportSet, DEFAULT_SIGMA_FLOOR,
};
use lccs_core::network::{count_lccs_params, BnLayer, BnMode, Head, Layer, Model, Trainable};
use lccs_core::optim::OptimizerConfig;
use lccs_core::reparam::{params_from_stats, stats_from_params, verify_equivalence, BnConfig};
use lccs_core::svd::svd_thin;
use lccs_core::synth::{policy_stream, sample_support, StreamOrder, StreamPolicy};
use lccs_core::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Published LCCS parameter count of a 20-BN-layer ResNet-18 at `n = 1`.
const RESNET18_N1_PARAMS: usize = 80;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "reparameterization equivalence", reparameterization),
        (2, "gradient correctness", gradients),
        (3, "generalization identity", identity),
        (4, "parameter counting", parameter_count),
        (6, "spanning-vector properties", spanning_vectors),
        (7, "stream invariance", stream_invariance),
        (8, "synthetic adaptation", synthetic_adaptation),
        (9, "streaming failure reproduction", streaming_failure),
        (10, "tent degenerate equivalence", tent_degenerate),
        (11, "timing shape", timing_shape),
        (12, "determinism", determinism),
        // Last, so it covers the adaptation runs of every other criterion.
        (5, "grid-search oracle", grid_oracle),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(id);
                ("FAIL", d)
            }
        };
        println!("criterion {id} {tag} {name}: {detail} ({secs:.2}s)");
    }
    if failed.is_empty() {
        println!("all 12 criteria passed");
    } else {
        failed.sort_unstable();
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// shared setup

struct Setup {
    cfg: ExperimentConfig,
    data: SeedData,
    model: Model,
}

/// Default moment-shift experiment, seed 0.
fn setup() -> &'static Setup {
    static CELL: OnceLock<Setup> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let data = make_data(&cfg, 0).unwrap();
        let model = make_source_model(&cfg, &data.train, 0).unwrap();
        Setup { cfg, data, model }
    })
}

struct LccsRun {
    label: String,
    source: Model,
    support: SupportSet,
    cfg: LccsConfig,
    v_star: f64,
}

fn runs() -> &'static Mutex<Vec<LccsRun>> {
    static RUNS: Mutex<Vec<LccsRun>> = Mutex::new(Vec::new());
    &RUNS
}

/// Runs the LCCS pipeline and records the run for the grid-search oracle.
fn run_lccs(label: String, source: &Model, support: &SupportSet, cfg: &LccsConfig) -> LccsOutcome {
    let out = adapt(source, support, cfg).unwrap();
    runs().lock().unwrap().push(LccsRun {
        label,
        source: source.clone(),
        support: support.clone(),
        cfg: cfg.clone(),
        v_star: out.v_star(),
    });
    out
}

fn support_for(pool: &Dataset, k: usize, seed: u64) -> SupportSet {
    sample_support(pool, k, derive_seed(seed, 0x5000 + k as u64)).unwrap()
}

fn accuracy(model: &Model, data: &Dataset) -> f64 {
    let p = model.predict_chunked(&data.inputs, 128).unwrap();
    p.iter().zip(&data.labels).filter(|(a, b)| a == b).count() as f64 / data.len() as f64
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn bits(t: &[f64]) -> Vec<u64> {
    t.iter().map(|x| x.to_bits()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn column(mat: &[f64], rows: usize, cols: usize, j: usize) -> Vec<f64> {
    (0..rows).map(|i| mat[i * cols + j]).collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0)).fold(0.0, f64::max)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean cross-entropy from logits with a max-shifted log-sum-exp.
fn mean_cross_entropy(logits: &[f64], labels: &[usize]) -> f64 {
    let k = logits.len() / labels.len();
    let total: f64 = logits
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Least-squares residual norm of `b` against the span of `cols` (Gram-Schmidt, two passes).
fn span_residual(cols: &[Vec<f64>], b: &[f64]) -> f64 {
    let scale = cols.iter().map(|c| norm(c)).fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let reduce = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        for _ in 0..2 {
            for e in basis {
                let d = dot(v, e);
                v.iter_mut().zip(e).for_each(|(x, y)| *x -= d * y);
            }
        }
    };
    for c in cols {
        let mut q = c.clone();
        reduce(&mut q, &basis);
        let n = norm(&q);
        if n > 1e-12 * scale.max(1e-300) {
            basis.push(q.iter().map(|x| x / n).collect());
        }
    }
    let mut r = b.to_vec();
    reduce(&mut r, &basis);
    norm(&r)
}

// ---------------------------------------------------------------------------
// criteria

fn reparameterization() -> Outcome {
    let started = Instant::now();
    let mut r = rng(1);
    let (mut worst_equiv, mut worst_trip) = (0.0f64, 0.0f64);
    for trial in 0..100u64 {
        let c = r.random_range(1..=16);
        let source = BnConfig::random(c, &mut r);
        let target = BnConfig::random(c, &mut r);

        let (mu_t, sigma_t) = stats_from_params(&target, &source.gamma, &source.beta).unwrap();
        let absorbed = BnConfig::new(mu_t.clone(), sigma_t.clone(), source.gamma.clone(), source.beta.clone()).unwrap();
        let rep = verify_equivalence(&absorbed, &target, 4, 1e-9, trial).unwrap();
        check!(rep.passed, "stats map deviates by {:e} (C = {c})", rep.max_deviation);
        worst_equiv = worst_equiv.max(rep.max_deviation);

        let (gamma, beta) =
            params_from_stats(&source.mu, &source.sigma, &target.mu, &target.sigma, &target.gamma, &target.beta)
                .unwrap();
        let moved = BnConfig::new(source.mu.clone(), source.sigma.clone(), gamma.clone(), beta.clone()).unwrap();
        let rep = verify_equivalence(&moved, &target, 4, 1e-9, !trial).unwrap();
        check!(rep.passed, "params map deviates by {:e} (C = {c})", rep.max_deviation);
        worst_equiv = worst_equiv.max(rep.max_deviation);

        // stats -> params recovers the source parameters
        let (g, b) =
            params_from_stats(&mu_t, &sigma_t, &target.mu, &target.sigma, &target.gamma, &target.beta).unwrap();
        // params -> stats recovers the target statistics
        let (m, s) = stats_from_params(&moved, &target.gamma, &target.beta).unwrap();
        for (x, y) in [(&g, &source.gamma), (&b, &source.beta), (&m, &target.mu), (&s, &target.sigma)] {
            let e = max_rel(x, y);
            check!(e < 1e-12, "round trip error {e:e} (C = {c})");
            worst_trip = worst_trip.max(e);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check!(secs < 5.0, "took {secs:.2}s");
    Ok(format!("100 configs, max deviation {worst_equiv:.1e}, max round-trip error {worst_trip:.1e}"))
}

fn network_loss(model: &Model, x: &Tensor, labels: &[usize]) -> f64 {
    let mut fwd = model.forward(x, Trainable::NONE).unwrap();
    let l = fwd.tape.cross_entropy(fwd.logits, labels).unwrap();
    fwd.tape.value(l).data()[0]
}

fn gradients() -> Outcome {
    const STEP: f64 = 1e-5;
    let started = Instant::now();
    let s = setup();
    let support = support_for(&s.data.pool, 3, 0);
    let stats = collect_support_stats(&s.model, &support, &StatsConfig::default()).unwrap();
    let init = grid_init(&s.model, &support, &stats, &default_grid(10), InitStrategy::Tied).unwrap();
    let spans = extract_spanning_vectors(&init.model, &support, &stats, 3).unwrap();
    let mut model = init.model;
    install_spanning_vectors(&mut model, &spans, DEFAULT_SIGMA_FLOOR).unwrap();
    // move the coefficients off the initialization so every column contributes
    for bn in model.bn_layers_mut() {
        let state = bn.lccs.as_mut().unwrap();
        for (j, (e, r)) in state.eta.iter_mut().zip(state.rho.iter_mut()).enumerate().skip(1) {
            *e += 0.05 * j as f64;
            *r += 0.02 * j as f64;
        }
    }
    let (x, labels) = (&support.data.inputs, &support.data.labels);
    let trainable = Trainable { bn_affine: true, lccs: true, ..Trainable::NONE };
    let mut fwd = model.forward(x, trainable).unwrap();
    let loss = fwd.tape.cross_entropy(fwd.logits, labels).unwrap();
    fwd.tape.backward(loss).unwrap();
    let (mut worst, mut count) = (0.0f64, 0usize);
    for (id, analytic) in fwd.param_grads() {
        for j in 0..analytic.len() {
            let mut plus = model.clone();
            plus.param_mut(id).unwrap()[j] += STEP;
            let mut minus = model.clone();
            minus.param_mut(id).unwrap()[j] -= STEP;
            let numeric = (network_loss(&plus, x, labels) - network_loss(&minus, x, labels)) / (2.0 * STEP);
            let e = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-6);
            check!(e < 1e-5, "{id:?}[{j}]: analytic {} numeric {numeric} rel err {e:e}", analytic[j]);
            worst = worst.max(e);
            count += 1;
        }
    }
    let expected: usize = model.bn_layers().map(|b| 2 * b.channels() + 2 * 4).sum();
    check!(count == expected, "checked {count} scalars, expected {expected}");
    let secs = started.elapsed().as_secs_f64();
    check!(secs < 30.0, "took {secs:.2}s");
    Ok(format!("{count} scalars (eta, rho, gamma, beta; n = 3), max rel err {worst:.1e}"))
}

fn identity() -> Outcome {
    let s = setup();
    let x = random_tensor(&[256, 3, 8, 8], 3);
    let expected = s.model.logits(&x).unwrap();
    let mut model = s.model.clone();
    let mut r = rng(4);
    for bn in model.bn_layers_mut() {
        let c = bn.channels();
        let n = 3;
        let mut m = vec![0.0; c * (n + 1)];
        let mut sig = vec![0.0; c * (n + 1)];
        for i in 0..c {
            m[i * (n + 1)] = bn.mu[i];
            sig[i * (n + 1)] = bn.sigma[i];
            for j in 1..=n {
                m[i * (n + 1) + j] = r.sample::<f64, _>(StandardNormal);
                sig[i * (n + 1) + j] = 1.0 + r.sample::<f64, _>(StandardNormal).abs();
            }
        }
        let e0 = vec![1.0, 0.0, 0.0, 0.0];
        bn.lccs = Some(LccsLayerState::new(c, m, sig, e0.clone(), e0, DEFAULT_SIGMA_FLOOR).unwrap());
        bn.mode = BnMode::Lccs;
    }
    let got = model.logits(&x).unwrap();
    check!(bits(got.data()) == bits(expected.data()), "logits differ from the source model");
    Ok("256 inputs, n = 3, logits bit-identical".into())
}

fn parameter_count() -> Outcome {
    let s = setup();
    let layers = s.model.bn_indices().len();
    let per = count_lccs_params(&s.model, 1).unwrap();
    check!(per == 4 * layers, "reference net: {per} for {layers} BN layers");
    let mock_layers = (0..20).map(|_| Layer::BatchNorm(BnLayer::new(4))).collect();
    let head = Head::Linear { weight: Tensor::zeros(&[4, 3]), bias: vec![0.0; 3], finetuned: false };
    let mock = Model::new(mock_layers, head, vec![4]).unwrap();
    let count = count_lccs_params(&mock, 1).unwrap();
    check!(count == RESNET18_N1_PARAMS, "20-BN mock reports {count}");
    Ok(format!("reference net {per} ({layers} BN layers), 20-BN mock {count} = {RESNET18_N1_PARAMS}"))
}

fn spanning_vectors() -> Outcome {
    let s = setup();
    let support = support_for(&s.data.pool, 3, 0);
    let samples = support.len();
    let stats = collect_support_stats(&s.model, &support, &StatsConfig::default()).unwrap();
    let init = grid_init(&s.model, &support, &stats, &default_grid(10), InitStrategy::Tied).unwrap();
    let spans = extract_spanning_vectors(&init.model, &support, &stats, samples).unwrap();
    let fwd = init.model.forward(&support.data.inputs, Trainable::NONE).unwrap();
    let (mut orth, mut recon, mut cover) = (0.0f64, 0.0f64, 0.0f64);
    for ((span, st), trace) in spans.iter().zip(&stats).zip(&fwd.bn) {
        let c = span.channels;
        check!(samples >= c, "support of {samples} is smaller than {c} channels");
        let z = fwd.tape.value(trace.input);
        let eps = init.model.bn(st.layer).unwrap().epsilon;
        let (means, sds) = per_sample_stats(z, eps).unwrap();
        for (per, first, mat) in [(&means, &st.mu, &span.m_spt), (&sds, &st.sigma, &span.sigma_spt)] {
            let residual = project_out(per, first, samples);
            for j in 0..samples {
                let col = column(&residual, c, samples, j);
                let e = dot(&col, first).abs() / (norm(&col) * norm(first)).max(1e-300);
                check!(e < 1e-8, "layer {}: residual column {j} not orthogonal ({e:e})", st.layer);
                orth = orth.max(e);
            }
            let svd = svd_thin(&residual, c, samples).unwrap();
            let back = svd.reconstruct(svd.rank_bound());
            let diff: Vec<f64> = back.iter().zip(&residual).map(|(a, b)| a - b).collect();
            let e = norm(&diff) / norm(&residual).max(1e-300);
            check!(e < 1e-10, "layer {}: SVD reconstruction error {e:e}", st.layer);
            recon = recon.max(e);

            let cols: Vec<Vec<f64>> = (0..span.n_eff).map(|j| column(mat, c, span.n_eff, j)).collect();
            for (i, a) in cols.iter().enumerate().skip(1) {
                if norm(a) > 0.0 {
                    let e = dot(a, first).abs() / (norm(a) * norm(first));
                    check!(e < 1e-8, "layer {}: spanning column {i} not orthogonal ({e:e})", st.layer);
                    orth = orth.max(e);
                }
            }
            for j in 0..samples {
                let target = column(per, c, samples, j);
                let e = span_residual(&cols, &target) / norm(&target);
                check!(e < 1e-8, "layer {}: sample {j} outside the span ({e:e})", st.layer);
                cover = cover.max(e);
            }
        }
    }
    let n_eff: Vec<usize> = spans.iter().map(|s| s.n_eff).collect();
    Ok(format!(
        "|support| = {samples}, n_eff {n_eff:?}, orthogonality {orth:.1e}, reconstruction {recon:.1e}, coverage {cover:.1e}"
    ))
}

fn stream_invariance() -> Outcome {
    let s = setup();
    let k = 5;
    let support = support_for(&s.data.pool, k, 0);
    let lc = lccs_config(&s.cfg, k, s.data.pool.classes, 0);
    let out = run_lccs("stream invariance, seed 0, k 5".into(), &s.model, &support, &lc);
    let adapted = Adapted::Offline(build_ncc_head(&out.model, &support).unwrap());
    let Adapted::Offline(frozen) = &adapted else { unreachable!() };
    check!(frozen.bn_layers().all(|b| b.mode == BnMode::Eval), "adapted model is not frozen");
    let test = &s.data.target_test;
    let reference = frozen.predict(&test.inputs).unwrap();
    let mut policies = 0;
    for batch in [1, 8, 32, 128] {
        for order in [StreamOrder::Shuffled, StreamOrder::ByClass] {
            for alpha in [1.0, 10.0, 100.0] {
                let stream = policy_stream(test, &StreamPolicy::new(batch, order, alpha, 7)).unwrap();
                let preds = evaluate(&adapted, test, &stream, 0.0).unwrap();
                check!(preds.len() == stream.iter().map(Vec::len).sum::<usize>(), "missing predictions");
                if let Some((i, p)) = preds.iter().find(|(i, p)| reference[*i] != *p) {
                    return Err(format!(
                        "sample {i} predicted {p} vs {} (batch {batch}, {}, alpha {alpha})",
                        reference[*i],
                        order.name()
                    ));
                }
                policies += 1;
            }
        }
    }
    Ok(format!("{policies} stream policies, predictions identical to a single full-batch pass"))
}

fn synthetic_adaptation() -> Outcome {
    let started = Instant::now();
    let cfg = ExperimentConfig::default();
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let (data, model) = if seed == 0 {
            let s = setup();
            (s.data.clone(), s.model.clone())
        } else {
            let data = make_data(&cfg, seed).unwrap();
            let model = make_source_model(&cfg, &data.train, seed).unwrap();
            (data, model)
        };
        let src = accuracy(&model, &data.source_test);
        let tgt = accuracy(&model, &data.target_test);
        let stats = StatsConfig { seed, ..StatsConfig::default() };
        let oracle = accuracy(&adabn_adapt(&model, &data.target_test, &stats).unwrap(), &data.target_test);
        let mut lccs_acc = [0.0; 2];
        for (slot, k) in [1usize, 10].into_iter().enumerate() {
            let support = support_for(&data.pool, k, seed);
            let lc = lccs_config(&cfg, k, data.pool.classes, seed);
            let out = run_lccs(format!("synthetic adaptation, seed {seed}, k {k}"), &model, &support, &lc);
            let adapted = if k >= 5 { build_ncc_head(&out.model, &support).unwrap() } else { out.model };
            lccs_acc[slot] = accuracy(&adapted, &data.target_test);
        }
        rows.push([src, tgt, oracle, lccs_acc[0], lccs_acc[1]]);
    }
    let secs = started.elapsed().as_secs_f64();
    let mut detail = String::new();
    for (seed, [src, tgt, oracle, k1, k10]) in rows.iter().enumerate() {
        detail += &format!(
            "\n    seed {seed}: source {src:.3} target {tgt:.3} oracle {oracle:.3} lccs k1 {k1:.3} k10 {k10:.3}"
        );
    }
    for (seed, &[src, tgt, oracle, _, k10]) in rows.iter().enumerate() {
        let drop = src - tgt;
        check!(src >= 0.95, "seed {seed}: source accuracy {src:.3}{detail}");
        check!(drop >= 0.20, "seed {seed}: drop {drop:.3}{detail}");
        check!(
            oracle - tgt >= 0.95 * drop,
            "seed {seed}: oracle recovers {:.3} of the drop{detail}",
            (oracle - tgt) / drop
        );
        check!(k10 >= oracle - 0.05, "seed {seed}: k = 10 LCCS {k10:.3} vs oracle {oracle:.3}{detail}");
    }
    let col = |j: usize| mean(&rows.iter().map(|r| r[j]).collect::<Vec<_>>());
    check!(col(3) > col(1), "k = 1 mean {:.3} does not beat source mean {:.3}{detail}", col(3), col(1));
    check!(secs < 180.0, "took {secs:.1}s{detail}");
    Ok(format!(
        "means: source {:.3} target {:.3} oracle {:.3} lccs k1 {:.3} k10 {:.3}{detail}",
        col(0),
        col(1),
        col(2),
        col(3),
        col(4)
    ))
}

/// Share of the most frequent prediction in each batch of the stream.
fn majority_shares(outcome: &OnlineOutcome, stream: &[Vec<usize>], classes: usize) -> Vec<f64> {
    let mut pos = 0;
    stream
        .iter()
        .map(|b| {
            let mut counts = vec![0usize; classes];
            for &p in &outcome.predictions[pos..pos + b.len()] {
                counts[p] += 1;
            }
            pos += b.len();
            *counts.iter().max().unwrap() as f64 / b.len() as f64
        })
        .collect()
}

/// Mean of the first and last quarter.
fn quartile_ends(v: &[f64]) -> (f64, f64) {
    let q = v.len() / 4;
    (mean(&v[..q]), mean(&v[v.len() - q..]))
}

fn streaming_failure() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.data.preset = Preset::WarpedShift;
    cfg.data.test_size = 5600;
    let mut detail = String::new();
    let (mut gaps, mut trends) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let data = make_data(&cfg, seed).unwrap();
        let model = make_source_model(&cfg, &data.train, seed).unwrap();
        let test = &data.target_test;
        let shuffled = policy_stream(test, &StreamPolicy::new(128, StreamOrder::Shuffled, 1.0, seed)).unwrap();
        let by_class = policy_stream(test, &StreamPolicy::new(8, StreamOrder::ByClass, 1.0, seed)).unwrap();
        let a_shuffled = testtime_bn_eval(&model, test, &shuffled, 1.0).unwrap().accuracy(&test.labels);
        let bn_by_class = testtime_bn_eval(&model, test, &by_class, 1.0).unwrap();
        let a_by_class = bn_by_class.accuracy(&test.labels);
        let tent = tent_eval(&model, test, &by_class, &OptimizerConfig::adam(cfg.adapt.tent_lr)).unwrap();
        let (t1, t4) = quartile_ends(&majority_shares(&tent, &by_class, test.classes));
        let (b1, b4) = quartile_ends(&majority_shares(&bn_by_class, &by_class, test.classes));
        gaps.push(a_shuffled - a_by_class);
        trends.push(t4 - t1);
        detail += &format!(
            "\n    seed {seed}: test-time BN shuffled-128 {a_shuffled:.3} by-class-8 {a_by_class:.3}; tent majority share q1 {t1:.3} q4 {t4:.3} (test-time BN q1 {b1:.3} q4 {b4:.3}), tent acc {:.3}",
            tent.accuracy(&test.labels)
        );
    }
    for (seed, gap) in gaps.iter().enumerate() {
        check!(*gap >= 0.10, "seed {seed}: by-class gap {gap:.3}{detail}");
    }
    check!(mean(&trends) > 0.0, "tent majority share trend {:.3}{detail}", mean(&trends));
    Ok(format!("mean test-time BN gap {:.3}, mean tent majority-share rise {:.3}{detail}", mean(&gaps), mean(&trends)))
}

fn tent_degenerate() -> Outcome {
    let s = setup();
    let test = &s.data.target_test;
    let policies = [
        StreamPolicy::new(128, StreamOrder::Shuffled, 1.0, 1),
        StreamPolicy::new(8, StreamOrder::ByClass, 1.0, 2),
        StreamPolicy::new(32, StreamOrder::Shuffled, 10.0, 3),
        StreamPolicy::new(3, StreamOrder::ByClass, 100.0, 4),
    ];
    for p in &policies {
        let stream = policy_stream(test, p).unwrap();
        let bn = testtime_bn_eval(&s.model, test, &stream, 1.0).unwrap();
        let tent = tent_eval(&s.model, test, &stream, &OptimizerConfig::adam(0.0)).unwrap();
        check!(tent.order == bn.order, "stream order differs");
        check!(bits(&tent.logits) == bits(&bn.logits), "logits differ (batch {}, {})", p.batch_size, p.order.name());
    }
    Ok(format!("{} streams, logits bit-identical", policies.len()))
}

fn timing_shape() -> Outcome {
    let s = setup();
    let k = 10;
    let classes = s.data.pool.classes;
    let support = support_for(&s.data.pool, k, 0);
    let lc = lccs_config(&s.cfg, k, classes, 0);
    let t = bench_epoch_time(&s.model, &support, &[1, k * classes], 15, &lc.gradient).unwrap();
    let ratio = t[1].median_secs / t[0].median_secs;
    let detail = format!(
        "n = 1: median {:.4}s; n = {} (n_eff {}): median {:.4}s; ratio {ratio:.2}",
        t[0].median_secs, t[1].n, t[1].n_effective, t[1].median_secs
    );
    check!(ratio < 3.0, "{detail}");
    check!(t[1].min_secs >= 0.95 * t[0].min_secs, "larger n is faster: {detail}");
    Ok(detail)
}

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = vec![0];
    cfg.adapt.strategies =
        ["none", "lccs", "adabn", "testtime-bn", "tent", "ft-bn", "ft-classifier", "ncc"].map(String::from).to_vec();
    cfg.assert_stream_invariance = false;
    let a = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let b = run_experiment(&cfg).map_err(|e| e.to_string())?;
    for format in [ReportFormat::Csv, ReportFormat::Jsonl] {
        let x = render_report(&without_timing(&a), format).unwrap();
        let y = render_report(&without_timing(&b), format).unwrap();
        check!(x == y, "{format:?} reports differ");
    }
    Ok(format!("{} records, CSV and JSONL byte-identical", a.len()))
}

/// Support loss with every BN layer in eval mode holding `(1 − v)·source + v·support`.
fn brute_force_grid(model: &Model, support: &SupportSet, stats: &[LayerStats], grid: &[f64]) -> Vec<f64> {
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

fn grid_oracle() -> Outcome {
    let runs = runs().lock().unwrap();
    check!(!runs.is_empty(), "no adaptation runs were recorded");
    let mut chosen = Vec::new();
    for run in runs.iter() {
        check!(run.cfg.grid.len() == 11, "{}: grid has {} values", run.label, run.cfg.grid.len());
        let stats = collect_support_stats(&run.source, &run.support, &run.cfg.stats).unwrap();
        let losses = brute_force_grid(&run.source, &run.support, &stats, &run.cfg.grid);
        let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let Some(at) = run.cfg.grid.iter().position(|&v| v == run.v_star) else {
            return Err(format!("{}: v* = {} is off the grid", run.label, run.v_star));
        };
        check!(
            losses[at] <= best + 1e-10 * best.abs().max(1.0),
            "{}: v* = {} has loss {} but the minimum is {best}",
            run.label,
            run.v_star,
            losses[at]
        );
        chosen.push(run.v_star);
    }
    Ok(format!("{} runs attain the brute-force minimum, v* values {chosen:?}", runs.len()))
}

mod common;

use common::*;
use lccs_core::baselines::{
    adabn_adapt, build_ncc_head, finetune_bn_params, finetune_classifier, tent_eval, testtime_bn_eval, StrategyKind,
};
use lccs_core::data::{rng, Dataset};
use lccs_core::lccs::{collect_batch_stats, StatsConfig, SupportSet};
use lccs_core::network::{count_lccs_params, BnLayer, BnMode, Head, HeadKind, Layer, Model};
use lccs_core::optim::OptimizerConfig;
use lccs_core::reparam::params_from_stats;
use lccs_core::synth::{policy_stream, sample_support, StreamOrder, StreamPolicy};
use lccs_core::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

fn stream(data: &Dataset, batch: usize, order: StreamOrder, seed: u64) -> Vec<Vec<usize>> {
    policy_stream(data, &StreamPolicy::new(batch, order, 1.0, seed)).unwrap()
}

fn predictions_by_batch(model: &Model, data: &Dataset, batch: usize, order: StreamOrder) -> Vec<usize> {
    let mut out = vec![usize::MAX; data.len()];
    for b in stream(data, batch, order, 3) {
        let p = model.predict(&data.inputs.gather_rows(&b).unwrap()).unwrap();
        for (&i, y) in b.iter().zip(p) {
            out[i] = y;
        }
    }
    out
}

#[test]
fn strategy_names_round_trip() {
    for kind in StrategyKind::ALL {
        assert_eq!(StrategyKind::from_name(kind.name()), Some(kind));
    }
    assert_eq!(StrategyKind::from_name("bogus"), None);
    let online: Vec<_> = StrategyKind::ALL.into_iter().filter(|k| k.is_online()).collect();
    assert_eq!(online, vec![StrategyKind::TestTimeBn, StrategyKind::Tent]);
}

#[test]
fn tent_without_learning_rate_is_testtime_bn() {
    let f = fixture();
    let zero = OptimizerConfig::adam(0.0);
    for (batch, order) in [(8, StreamOrder::ByClass), (32, StreamOrder::Shuffled), (1, StreamOrder::Shuffled)] {
        let s = stream(&f.target_test, batch, order, 9);
        let s = if batch == 1 { s[..40].to_vec() } else { s };
        let a = testtime_bn_eval(&f.source, &f.target_test, &s, 1.0).unwrap();
        let b = tent_eval(&f.source, &f.target_test, &s, &zero).unwrap();
        assert_eq!(a.order, b.order);
        assert!(a.logits.iter().zip(&b.logits).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn tent_updates_persist_across_batches() {
    let f = fixture();
    let s = stream(&f.target_test, 16, StreamOrder::Shuffled, 2);
    let a = testtime_bn_eval(&f.source, &f.target_test, &s, 1.0).unwrap();
    let b = tent_eval(&f.source, &f.target_test, &s, &OptimizerConfig::adam(1e-2)).unwrap();
    let k = f.target_test.classes;
    // the first batch is predicted before any step
    assert_eq!(a.logits[..16 * k], b.logits[..16 * k]);
    assert_ne!(a.logits[16 * k..], b.logits[16 * k..]);
}

#[test]
fn online_strategies_depend_on_stream_composition() {
    let f = fixture();
    let n = f.target_test.len();
    let shuffled =
        testtime_bn_eval(&f.source, &f.target_test, &stream(&f.target_test, 128, StreamOrder::Shuffled, 1), 1.0)
            .unwrap()
            .by_index(n);
    let by_class =
        testtime_bn_eval(&f.source, &f.target_test, &stream(&f.target_test, 8, StreamOrder::ByClass, 1), 1.0)
            .unwrap()
            .by_index(n);
    assert!(shuffled.iter().all(Option::is_some));
    assert!(shuffled.iter().zip(&by_class).any(|(a, b)| a != b));
}

#[test]
fn zero_blend_uses_stored_statistics() {
    let f = fixture();
    let s = stream(&f.target_test, 32, StreamOrder::Shuffled, 4);
    let out = testtime_bn_eval(&f.source, &f.target_test, &s, 0.0).unwrap();
    let want = f.source.logits(&f.target_test.inputs).unwrap();
    let k = f.target_test.classes;
    for (row, &i) in out.logits.chunks(k).zip(&out.order) {
        for (a, b) in row.iter().zip(&want.data()[i * k..(i + 1) * k]) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
    assert!(testtime_bn_eval(&f.source, &f.target_test, &s, 1.5).is_err());
    assert!(testtime_bn_eval(&f.source, &f.target_test, &[], 1.0).is_err());
}

#[test]
fn adabn_installs_target_statistics() {
    let f = fixture();
    let cfg = StatsConfig::default();
    let adapted = adabn_adapt(&f.source, &f.target_pool, &cfg).unwrap();
    let stats = collect_batch_stats(&f.source, &f.target_pool, &cfg).unwrap();
    for s in &stats {
        let bn = adapted.bn(s.layer).unwrap();
        assert_eq!((&bn.mu, &bn.sigma), (&s.mu, &s.sigma));
        assert_eq!(bn.mode, BnMode::Eval);
        assert!(bn.lccs.is_none());
    }
    assert!(accuracy(&adapted, &f.target_test) > accuracy(&f.source, &f.target_test));
}

/// Nearest centroid by brute force over squared distances; ties go to the lower class.
fn ncc_oracle(features: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter().enumerate() {
        let d: f64 = features.iter().zip(centre).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

#[test]
fn ncc_head_matches_brute_force() {
    let f = fixture();
    let sup = sample_support(&f.target_pool, 5, 3).unwrap();
    let adapted = adabn_adapt(&f.source, &sup.data, &StatsConfig::default()).unwrap();
    let ncc = build_ncc_head(&adapted, &sup).unwrap();
    assert_eq!(ncc.head.kind(), HeadKind::NearestCentroid);
    let feats = adapted.features(&sup.data.inputs).unwrap();
    let d = feats.shape()[1];
    let centroids: Vec<Vec<f64>> = (0..sup.classes())
        .map(|c| {
            let rows: Vec<&[f64]> =
                feats.data().chunks(d).zip(&sup.data.labels).filter(|(_, &y)| y == c).map(|(r, _)| r).collect();
            (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
        })
        .collect();
    let test_feats = adapted.features(&f.target_test.inputs).unwrap();
    let preds = ncc.predict(&f.target_test.inputs).unwrap();
    for (row, p) in test_feats.data().chunks(d).zip(preds) {
        assert_eq!(p, ncc_oracle(row, &centroids));
    }
}

#[test]
fn ncc_ties_go_to_the_lower_class() {
    let head = Head::NearestCentroid { centroids: Tensor::new(&[3, 2], vec![1.0, 0.0, 1.0, 0.0, -5.0, 0.0]).unwrap() };
    let model = Model::new(vec![Layer::Flatten], head, vec![2]).unwrap();
    let x = Tensor::new(&[2, 2], vec![1.0, 0.5, -4.0, 0.0]).unwrap();
    assert_eq!(model.predict(&x).unwrap(), vec![0, 2]);
}

#[test]
fn ncc_needs_every_class() {
    let f = fixture();
    let idx: Vec<usize> = (0..f.target_pool.len()).filter(|&i| f.target_pool.labels[i] != 3).take(20).collect();
    let sup = SupportSet { data: f.target_pool.subset(&idx).unwrap(), indices: idx, k: 3, seed: 0 };
    assert!(build_ncc_head(&f.source, &sup).is_err());
}

#[test]
fn zero_epoch_finetuning_leaves_model_unchanged() {
    let f = fixture();
    let sup = sample_support(&f.target_pool, 2, 1).unwrap();
    let opt = OptimizerConfig::adam(1e-2);
    assert_eq!(finetune_bn_params(&f.source, &sup, &opt, 0, 0).unwrap().model, f.source);
    let head = finetune_classifier(&f.source, &sup, &opt, 0, 0).unwrap().model;
    assert_eq!(head.layers, f.source.layers);
    assert_eq!(head.head.kind(), HeadKind::FinetunedLinear);
}

#[test]
fn classifier_finetuning_fits_support_and_keeps_features() {
    let f = fixture();
    let sup = sample_support(&f.target_pool, 5, 2).unwrap();
    let adapted = adabn_adapt(&f.source, &sup.data, &StatsConfig::default()).unwrap();
    let out = finetune_classifier(&adapted, &sup, &OptimizerConfig::adam(0.05), 60, 0).unwrap();
    assert_eq!(accuracy(&out.model, &sup.data), 1.0);
    assert!(out.loss_curve.last().unwrap() < &out.loss_curve[0]);
    let before = adapted.features(&f.target_test.inputs).unwrap();
    let after = out.model.features(&f.target_test.inputs).unwrap();
    assert_eq!(before, after);
}

#[test]
fn bn_parameter_finetuning_moves_only_affine_parameters() {
    let f = fixture();
    let sup = sample_support(&f.target_pool, 5, 4).unwrap();
    let out = finetune_bn_params(&f.source, &sup, &OptimizerConfig::adam(1e-2), 10, 0).unwrap();
    assert!(out.loss_curve[10] < out.loss_curve[0]);
    for (a, b) in out.model.layers.iter().zip(&f.source.layers) {
        match (a, b) {
            (Layer::BatchNorm(x), Layer::BatchNorm(y)) => {
                assert_eq!((&x.mu, &x.sigma), (&y.mu, &y.sigma));
                assert_ne!(x.gamma, y.gamma);
            }
            _ => assert_eq!(a, b),
        }
    }
    assert_eq!(out.model.head, f.source.head);
    assert!(f.source.bn_affine_param_count() > count_lccs_params(&f.source, 1).unwrap());
}

#[test]
fn affine_parameters_can_absorb_target_statistics() {
    let mut r = rng(5);
    let (mu_s, sigma_s) = (vec![0.3, -0.2], vec![1.1, 0.9]);
    let (mu_t, sigma_t) = (vec![6.0, -3.0], vec![3.5, 4.2]);
    let head = Head::Linear {
        weight: Tensor::new(&[2, 2], vec![-2.0, 2.0, 1.0, -1.0]).unwrap(),
        bias: vec![0.1, 0.0],
        finetuned: false,
    };
    let net = |bn: BnLayer| Model::new(vec![Layer::BatchNorm(bn)], head.clone(), vec![2]).unwrap();
    let target_normalized =
        net(BnLayer::from_parts(mu_t.clone(), sigma_t.clone(), vec![1.0; 2], vec![0.0; 2], 1e-5).unwrap());
    let (gamma, beta) = params_from_stats(&mu_s, &sigma_s, &mu_t, &sigma_t, &[1.0; 2], &[0.0; 2]).unwrap();
    let reparam = net(BnLayer::from_parts(mu_s, sigma_s, gamma, beta, 1e-5).unwrap());
    let x = Tensor::new(
        &[64, 2],
        (0..128).map(|i| 5.0 * r.sample::<f64, _>(StandardNormal) + [6.0, -3.0][i % 2]).collect(),
    )
    .unwrap();
    let a = target_normalized.logits(&x).unwrap();
    let b = reparam.logits(&x).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() <= 1e-10 * p.abs().max(1.0));
    }
}

#[test]
fn offline_strategies_ignore_batching() {
    let f = fixture();
    let sup = sample_support(&f.target_pool, 3, 6).unwrap();
    let opt = OptimizerConfig::adam(1e-2);
    let models = [
        adabn_adapt(&f.source, &sup.data, &StatsConfig::default()).unwrap(),
        finetune_bn_params(&f.source, &sup, &opt, 2, 0).unwrap().model,
        finetune_classifier(&f.source, &sup, &opt, 2, 0).unwrap().model,
        build_ncc_head(&f.source, &sup).unwrap(),
    ];
    for m in &models {
        let reference = predictions_by_batch(m, &f.target_test, 128, StreamOrder::Shuffled);
        for (batch, order) in [(1, StreamOrder::Shuffled), (8, StreamOrder::ByClass), (32, StreamOrder::ByClass)] {
            assert_eq!(predictions_by_batch(m, &f.target_test, batch, order), reference);
        }
    }
}

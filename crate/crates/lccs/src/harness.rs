//! End-to-end experiments: data, source training, adaptation, streamed
//! evaluation and result reports.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use lccs_core::baselines::{
    adabn_adapt, build_ncc_head, finetune_bn_params, finetune_classifier, tent_eval, testtime_bn_eval, StrategyKind,
};
use lccs_core::data::{derive_seed, Dataset};
use lccs_core::lccs::{self, default_grid, default_n, GradientConfig, InitStrategy, LccsConfig, StatsConfig};
use lccs_core::metrics::{compute_metrics, Metric};
use lccs_core::network::{train_source, Model, TrainConfig};
use lccs_core::optim::OptimizerConfig;
use lccs_core::synth::{gen_dataset, policy_stream, sample_support};
use serde::{Deserialize, Serialize};

use crate::checkpoint::AdaptationInfo;
use crate::config::{Arch, ClassifierChoice, ExperimentConfig};

/// A failure tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}

impl std::error::Error for StageError {}

pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: fmt::Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError { stage, message: e.to_string() })
    }
}

pub const CSV_HEADER: [&str; 11] =
    ["strategy", "k", "n", "stream_batch", "stream_order", "alpha", "metric", "value", "seed", "secs", "config_digest"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub strategy: String,
    pub k: usize,
    pub n: usize,
    pub stream_batch: usize,
    pub stream_order: String,
    pub alpha: f64,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub secs: f64,
    pub config_digest: String,
}

impl ResultRecord {
    fn key_cmp(&self, other: &Self) -> Ordering {
        (&self.strategy, self.k, self.n, self.stream_batch, &self.stream_order)
            .cmp(&(&other.strategy, other.k, other.n, other.stream_batch, &other.stream_order))
            .then(self.alpha.total_cmp(&other.alpha))
            .then_with(|| (&self.metric, self.seed).cmp(&(&other.metric, other.seed)))
            .then(self.value.total_cmp(&other.value))
            .then(self.secs.total_cmp(&other.secs))
            .then_with(|| self.config_digest.cmp(&other.config_digest))
    }
}

/// Datasets of one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub train: Dataset,
    /// Held-out source-domain samples.
    pub source_test: Dataset,
    pub target_test: Dataset,
    /// Target samples the support set is drawn from.
    pub pool: Dataset,
}

pub fn make_data(cfg: &ExperimentConfig, seed: u64) -> lccs_core::Result<SeedData> {
    let (src, tgt) = cfg.data.preset.domains(seed);
    Ok(SeedData {
        train: gen_dataset(&src, cfg.data.train_size, derive_seed(seed, 1))?,
        source_test: gen_dataset(&src, cfg.data.test_size, derive_seed(seed, 2))?,
        target_test: gen_dataset(&tgt, cfg.data.test_size, derive_seed(seed, 3))?,
        pool: gen_dataset(&tgt, cfg.data.pool_size, derive_seed(seed, 4))?,
    })
}

pub fn make_source_model(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> lccs_core::Result<Model> {
    let shape = data.sample_shape().to_vec();
    let model = match cfg.model.arch {
        Arch::Conv => Model::reference_conv(&shape, data.classes, seed)?,
        Arch::Mlp => Model::reference_mlp(&shape, cfg.model.hidden, data.classes, seed)?,
    };
    let train = TrainConfig {
        epochs: cfg.train.epochs,
        optimizer: OptimizerConfig::adam(cfg.train.lr).with_batch_size(cfg.train.batch),
        seed,
        jitter: cfg.train.jitter,
    };
    train_source(model, data, &train)
}

pub fn lccs_config(cfg: &ExperimentConfig, k: usize, classes: usize, seed: u64) -> LccsConfig {
    let a = &cfg.adapt;
    LccsConfig {
        n: a.n.unwrap_or_else(|| default_n(k, classes)),
        stats: StatsConfig { epochs: a.epochs, batch_size: a.batch, seed, ..StatsConfig::default() },
        grid: default_grid(a.grid_steps),
        init: if a.greedy_init { InitStrategy::Greedy } else { InitStrategy::Tied },
        init_stage: a.init_stage,
        gradient_stage: a.gradient_stage,
        gradient: GradientConfig {
            epochs: a.epochs,
            optimizer: OptimizerConfig::adam(a.lr).with_batch_size(a.batch),
            convex: a.convex,
            jitter: 0.0,
            seed,
        },
        sigma_floor: lccs::DEFAULT_SIGMA_FLOOR,
    }
}

/// Result of the adaptation step of one strategy.
#[derive(Debug, Clone)]
pub enum Adapted {
    /// Frozen model; predictions do not depend on the stream.
    Offline(Model),
    /// Source model that adapts while streaming.
    Online(Model, StrategyKind),
}

/// Adapts `model` with `kind` using `k` support samples per class from `pool`.
pub fn adapt_strategy(
    cfg: &ExperimentConfig,
    model: &Model,
    pool: &Dataset,
    kind: StrategyKind,
    k: usize,
    seed: u64,
) -> lccs_core::Result<(Adapted, AdaptationInfo)> {
    let a = &cfg.adapt;
    let support = || sample_support(pool, k, derive_seed(seed, 0x5000 + k as u64));
    let opt = OptimizerConfig::adam(a.lr).with_batch_size(a.batch);
    let mut info = AdaptationInfo { strategy: kind.name().into(), k, ..Default::default() };
    let adapted = match kind {
        StrategyKind::Source => Adapted::Offline(model.clone()),
        StrategyKind::TestTimeBn => Adapted::Online(model.clone(), kind),
        StrategyKind::Tent => {
            info.online_lr = Some(a.tent_lr);
            Adapted::Online(model.clone(), kind)
        }
        StrategyKind::AdaBn => {
            let stats = StatsConfig { epochs: a.epochs, batch_size: a.batch, seed, ..StatsConfig::default() };
            Adapted::Offline(adabn_adapt(model, &support()?.data, &stats)?)
        }
        StrategyKind::FinetuneBnParams => {
            let out = finetune_bn_params(model, &support()?, &opt, a.epochs, seed)?;
            info.loss_curve = out.loss_curve;
            Adapted::Offline(out.model)
        }
        StrategyKind::FinetuneClassifier => {
            let out = finetune_classifier(model, &support()?, &opt, a.epochs, seed)?;
            info.loss_curve = out.loss_curve;
            Adapted::Offline(out.model)
        }
        StrategyKind::NccHead => Adapted::Offline(build_ncc_head(model, &support()?)?),
        StrategyKind::Lccs => {
            let support = support()?;
            let lc = lccs_config(cfg, k, pool.classes, seed);
            let outcome = lccs::adapt(model, &support, &lc)?;
            info.n = lc.n;
            info.per_layer_v = outcome.per_layer_v;
            info.n_effective = outcome.n_effective;
            info.loss_curve = outcome.loss_curve;
            let adapted = outcome.model;
            let adapted = match a.classifier {
                ClassifierChoice::Auto if k >= 5 => build_ncc_head(&adapted, &support)?,
                ClassifierChoice::Ncc => build_ncc_head(&adapted, &support)?,
                ClassifierChoice::Finetuned => finetune_classifier(&adapted, &support, &opt, a.epochs, seed)?.model,
                _ => adapted,
            };
            Adapted::Offline(adapted)
        }
    };
    Ok((adapted, info))
}

/// Per-sample predictions `(dataset index, class)` along the stream.
pub fn evaluate(
    adapted: &Adapted,
    data: &Dataset,
    stream: &[Vec<usize>],
    tent_lr: f64,
) -> lccs_core::Result<Vec<(usize, usize)>> {
    match adapted {
        Adapted::Offline(model) => {
            let mut out = Vec::new();
            for batch in stream {
                let preds = model.predict(&data.inputs.gather_rows(batch)?)?;
                out.extend(batch.iter().copied().zip(preds));
            }
            Ok(out)
        }
        Adapted::Online(model, kind) => {
            let outcome = match kind {
                StrategyKind::Tent => tent_eval(model, data, stream, &OptimizerConfig::adam(tent_lr))?,
                _ => testtime_bn_eval(model, data, stream, 1.0)?,
            };
            Ok(outcome.order.into_iter().zip(outcome.predictions).collect())
        }
    }
}

/// Runs every (seed, strategy, k, stream) cell of the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>, StageError> {
    cfg.validate().stage("config")?;
    let strategies = cfg.strategies().stage("config")?;
    let digest = cfg.digest();
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let data = make_data(cfg, seed).stage("gen-data")?;
        let source = make_source_model(cfg, &data.train, seed).stage("train-source")?;
        for &kind in &strategies {
            let uses_support = !matches!(kind, StrategyKind::Source | StrategyKind::TestTimeBn | StrategyKind::Tent);
            let ks: Vec<usize> = if uses_support { cfg.adapt.k.clone() } else { vec![0] };
            for k in ks {
                let started = Instant::now();
                let (adapted, info) = adapt_strategy(cfg, &source, &data.pool, kind, k, seed).stage("adapt")?;
                let adapt_secs = started.elapsed().as_secs_f64();
                let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
                for stream_cfg in &cfg.streams {
                    let policy = stream_cfg.policy(derive_seed(seed, 0x7300));
                    let started = Instant::now();
                    let stream = policy_stream(&data.target_test, &policy).stage("eval")?;
                    let preds = evaluate(&adapted, &data.target_test, &stream, cfg.adapt.tent_lr).stage("eval")?;
                    let secs = adapt_secs + started.elapsed().as_secs_f64();
                    if cfg.assert_stream_invariance {
                        for &(i, p) in &preds {
                            if let Some(&prev) = seen.get(&i) {
                                if prev != p {
                                    return Err(StageError {
                                        stage: "eval",
                                        message: format!(
                                            "{} prediction for sample {i} changed with the stream ({prev} vs {p})",
                                            kind.name()
                                        ),
                                    });
                                }
                            }
                            seen.insert(i, p);
                        }
                    }
                    let (labels, predicted): (Vec<usize>, Vec<usize>) =
                        preds.iter().map(|&(i, p)| (data.target_test.labels[i], p)).unzip();
                    for metric in Metric::ALL {
                        records.push(ResultRecord {
                            strategy: kind.name().to_string(),
                            k,
                            n: info.n,
                            stream_batch: stream_cfg.batch,
                            stream_order: policy.order.name().to_string(),
                            alpha: stream_cfg.alpha,
                            metric: metric.name().to_string(),
                            value: compute_metrics(&predicted, &labels, metric).stage("eval")?,
                            seed,
                            secs,
                            config_digest: digest.clone(),
                        });
                    }
                }
            }
        }
    }
    records.sort_by(ResultRecord::key_cmp);
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(Self::Csv),
            "jsonl" => Some(Self::Jsonl),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("report I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("report CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed report: {0}")]
    Malformed(String),
}

/// Renders records sorted by every key column.
pub fn render_report(records: &[ResultRecord], format: ReportFormat) -> Result<Vec<u8>, ReportError> {
    let mut sorted = records.to_vec();
    sorted.sort_by(ResultRecord::key_cmp);
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER)?;
            for r in &sorted {
                w.write_record([
                    r.strategy.clone(),
                    r.k.to_string(),
                    r.n.to_string(),
                    r.stream_batch.to_string(),
                    r.stream_order.clone(),
                    r.alpha.to_string(),
                    r.metric.clone(),
                    r.value.to_string(),
                    r.seed.to_string(),
                    r.secs.to_string(),
                    r.config_digest.clone(),
                ])?;
            }
            w.into_inner().map_err(|e| ReportError::Io(e.into_error()))
        }
        ReportFormat::Jsonl => {
            let mut out = Vec::new();
            for r in &sorted {
                serde_json::to_writer(&mut out, r)?;
                out.push(b'\n');
            }
            Ok(out)
        }
    }
}

pub fn emit_report(records: &[ResultRecord], path: &Path, format: ReportFormat) -> Result<(), ReportError> {
    std::fs::write(path, render_report(records, format)?)?;
    Ok(())
}

pub fn parse_report(bytes: &[u8], format: ReportFormat) -> Result<Vec<ResultRecord>, ReportError> {
    match format {
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_reader(bytes);
            let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
            if header != CSV_HEADER {
                return Err(ReportError::Malformed(format!("unexpected header {header:?}")));
            }
            r.deserialize().map(|row| row.map_err(ReportError::from)).collect()
        }
        ReportFormat::Jsonl => bytes
            .split(|&b| b == b'\n')
            .filter(|line| !line.is_empty())
            .map(|line| serde_json::from_slice(line).map_err(ReportError::from))
            .collect(),
    }
}

pub fn load_report(path: &Path, format: ReportFormat) -> Result<Vec<ResultRecord>, ReportError> {
    parse_report(&std::fs::read(path)?, format)
}

/// Copies of `records` with the wall-clock column zeroed.
pub fn without_timing(records: &[ResultRecord]) -> Vec<ResultRecord> {
    records.iter().cloned().map(|r| ResultRecord { secs: 0.0, ..r }).collect()
}

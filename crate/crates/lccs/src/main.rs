use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lccs::bench::bench_epoch_time;
use lccs::checkpoint::{AdaptationInfo, Checkpoint};
use lccs::config::{Arch, ClassifierChoice, ExperimentConfig, Preset};
use lccs::dataset_io;
use lccs::harness::{self, emit_report, Adapted, ReportFormat, StageError, StageExt};
use lccs_core::baselines::StrategyKind;
use lccs_core::lccs::{default_n, GradientConfig};
use lccs_core::metrics::{compute_metrics, Metric};
use lccs_core::optim::OptimizerConfig;
use lccs_core::synth::{gen_dataset, policy_stream, sample_support, StreamOrder, StreamPolicy};

#[derive(Parser)]
#[command(name = "lccs", version, about = "Few-shot adaptation of batch-norm statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    MomentShift,
    WarpedShift,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::MomentShift => Preset::MomentShift,
            PresetArg::WarpedShift => Preset::WarpedShift,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Shuffled,
    ByClass,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long, value_enum, default_value = "moment-shift")]
        preset: PresetArg,
        #[arg(long, value_enum, default_value = "source")]
        domain: Domain,
        #[arg(long, default_value_t = 700)]
        size: usize,
        /// Seeds the class means and rendering map shared by both domains.
        #[arg(long, default_value_t = 0)]
        task_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a source model on a dataset file.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "conv")]
        arch: ArchArg,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a checkpoint with one strategy using support samples from a dataset file.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        /// Target samples to draw the support set from.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "lccs")]
        strategy: String,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Spanning-vector count (default: k·K for k ≥ 5, else 1).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 10)]
        grid_steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// auto, source, finetuned or ncc.
        #[arg(long, default_value = "auto")]
        classifier: String,
        #[arg(long)]
        convex: bool,
        #[arg(long)]
        greedy_init: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset file under one stream policy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, value_enum, default_value = "shuffled")]
        order: Order,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time one gradient-stage epoch at n = 1 and n = k·K.
    BenchTime {
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an experiment config and write the result report.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Conv,
    Mlp,
}

fn run(cli: Cli) -> Result<(), StageError> {
    match cli.command {
        Command::GenData { preset, domain, size, task_seed, seed, out } => {
            let (src, tgt) = Preset::from(preset).domains(task_seed);
            let spec = match domain {
                Domain::Source => src,
                Domain::Target => tgt,
            };
            let data = gen_dataset(&spec, size, seed).stage("gen-data")?;
            dataset_io::save(&data, &format!("{spec:?}"), &out).stage("gen-data")?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::TrainSource { data, arch, epochs, lr, seed, out } => {
            let data = dataset_io::load(&data).stage("train-source")?;
            let mut cfg = ExperimentConfig::default();
            cfg.model.arch = match arch {
                ArchArg::Conv => Arch::Conv,
                ArchArg::Mlp => Arch::Mlp,
            };
            cfg.train.epochs = epochs;
            cfg.train.lr = lr;
            let model = harness::make_source_model(&cfg, &data, seed).stage("train-source")?;
            let acc = model
                .predict_chunked(&data.inputs, 256)
                .and_then(|p| compute_metrics(&p, &data.labels, Metric::Accuracy))
                .stage("train-source")?;
            Checkpoint::new(model)
                .with_adaptation(AdaptationInfo { strategy: "none".into(), ..Default::default() })
                .save(&out)
                .stage("train-source")?;
            println!("training accuracy {acc:.4}; wrote {}", out.display());
        }
        Command::Adapt {
            model,
            data,
            strategy,
            k,
            n,
            epochs,
            grid_steps,
            lr,
            classifier,
            convex,
            greedy_init,
            seed,
            out,
        } => {
            let kind = StrategyKind::from_name(&strategy)
                .ok_or_else(|| StageError { stage: "adapt", message: format!("unknown strategy {strategy:?}") })?;
            let classifier = ClassifierChoice::parse(&classifier)
                .ok_or_else(|| StageError { stage: "adapt", message: format!("unknown classifier {classifier:?}") })?;
            let ckpt = Checkpoint::load(&model).stage("adapt")?;
            let pool = dataset_io::load(&data).stage("adapt")?;
            let mut cfg = ExperimentConfig::default();
            cfg.adapt.n = n;
            cfg.adapt.epochs = epochs;
            cfg.adapt.grid_steps = grid_steps;
            cfg.adapt.lr = lr;
            cfg.adapt.tent_lr = lr;
            cfg.adapt.classifier = classifier;
            cfg.adapt.convex = convex;
            cfg.adapt.greedy_init = greedy_init;
            let (adapted, info) = harness::adapt_strategy(&cfg, &ckpt.model, &pool, kind, k, seed).stage("adapt")?;
            let model = match adapted {
                Adapted::Offline(m) | Adapted::Online(m, _) => m,
            };
            Checkpoint::new(model).with_adaptation(info).save(&out).stage("adapt")?;
            println!("wrote {}", out.display());
        }
        Command::Eval { model, data, batch, order, alpha, seed } => {
            let ckpt = Checkpoint::load(&model).stage("eval")?;
            let data = dataset_io::load(&data).stage("eval")?;
            let order = match order {
                Order::Shuffled => StreamOrder::Shuffled,
                Order::ByClass => StreamOrder::ByClass,
            };
            let stream = policy_stream(&data, &StreamPolicy::new(batch, order, alpha, seed)).stage("eval")?;
            let info = ckpt.adaptation.clone().unwrap_or_default();
            let kind = StrategyKind::from_name(&info.strategy).unwrap_or(StrategyKind::Source);
            let adapted =
                if kind.is_online() { Adapted::Online(ckpt.model, kind) } else { Adapted::Offline(ckpt.model) };
            let lr = info.online_lr.unwrap_or(1e-3);
            let preds = harness::evaluate(&adapted, &data, &stream, lr).stage("eval")?;
            let (labels, predicted): (Vec<usize>, Vec<usize>) = preds.iter().map(|&(i, p)| (data.labels[i], p)).unzip();
            for metric in Metric::ALL {
                let v = compute_metrics(&predicted, &labels, metric).stage("eval")?;
                println!("{{\"metric\":\"{}\",\"value\":{v},\"samples\":{}}}", metric.name(), labels.len());
            }
        }
        Command::BenchTime { k, reps, seed } => {
            let cfg = ExperimentConfig::default();
            let data = harness::make_data(&cfg, seed).stage("bench-time")?;
            let model = harness::make_source_model(&cfg, &data.train, seed).stage("bench-time")?;
            let support = sample_support(&data.pool, k, seed).stage("bench-time")?;
            let ns = [1, default_n(k, data.pool.classes).max(k * data.pool.classes)];
            let gcfg = GradientConfig { optimizer: OptimizerConfig::adam(1e-3), seed, ..GradientConfig::default() };
            let timings = bench_epoch_time(&model, &support, &ns, reps, &gcfg).stage("bench-time")?;
            for t in &timings {
                println!("n={} n_effective={} min={:.6}s median={:.6}s", t.n, t.n_effective, t.min_secs, t.median_secs);
            }
            println!("ratio(median)={:.3}", timings[1].median_secs / timings[0].median_secs);
        }
        Command::Report { config, out, format } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p).stage("config")?,
                None => ExperimentConfig::default(),
            };
            let records = harness::run_experiment(&cfg)?;
            let format = match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Jsonl => ReportFormat::Jsonl,
            };
            emit_report(&records, &out, format).stage("report")?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

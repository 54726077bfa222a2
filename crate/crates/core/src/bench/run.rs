use super::config::{DatasetConfig, ExperimentConfig, SourceKind};
use super::records::{now_rfc3339, BaselineRecord, RunRecord, RunStatus};
use super::BenchError;
use crate::data::{load_client_dirs, load_idx, partition, synth_dataset_with_noise, ClientDataset, Dataset};
use crate::metrics::{compile_reports, fl_accuracy, AccuracyReport, RecordContext};
use crate::nn::{ModelSpec, ParamVector};
use crate::protocol::{run_training, RunOptions};
use crate::seed;
use crate::strategy::{build, run_baselines};

/// The unpartitioned image pool of an `mnist` or `synth` source.
pub fn load_pool(ds: &DatasetConfig, base_seed: u64) -> Result<Dataset, BenchError> {
    match ds.source {
        SourceKind::Mnist => {
            let (images, labels) = (ds.images.as_ref(), ds.labels.as_ref());
            let full = load_idx(images.expect("resolved"), labels.expect("resolved"))?;
            Ok(match ds.subset {
                Some(n) => full.balanced_prefix(n)?,
                None => full,
            })
        }
        SourceKind::Synth => {
            let side = ds.side.unwrap_or(28);
            Ok(synth_dataset_with_noise(
                ds.samples.unwrap_or(0),
                ds.classes.unwrap_or(2),
                side,
                seed::mix_str(base_seed, "synth"),
                ds.noise.unwrap_or(crate::data::SYNTH_NOISE),
            ))
        }
        SourceKind::Dir => Err(super::ConfigError {
            path: "dataset.source".into(),
            message: "dir sources are already partitioned".into(),
        }
        .into()),
    }
}

/// Client datasets, the input shape and the class count.
pub fn load_clients(cfg: &ExperimentConfig) -> Result<(Vec<ClientDataset>, [usize; 3], usize), BenchError> {
    let ds = &cfg.dataset;
    let clients = match ds.source {
        SourceKind::Dir => load_client_dirs(ds.root.as_ref().expect("resolved"), ds.classes.unwrap_or(0))?,
        _ => {
            let pool = load_pool(ds, cfg.seed)?;
            let plan = ds.partition_plan(cfg.seed).expect("resolved");
            partition(&pool, &plan)?
        }
    };
    let first = clients.first().ok_or_else(|| super::ConfigError {
        path: "dataset".into(),
        message: "no clients".into(),
    })?;
    let shape = first.train.image_shape();
    let classes = first.n_classes();
    Ok((clients, shape, classes))
}

fn context(cfg: &ExperimentConfig, cell: &str) -> RecordContext {
    let s = &cfg.strategy;
    RecordContext {
        dataset: match cfg.dataset.source {
            SourceKind::Mnist => "mnist",
            SourceKind::Synth => "synth",
            SourceKind::Dir => "dir",
        }
        .into(),
        model: cfg.model.label().into(),
        optimizer: s.optimizer.kind.as_str().into(),
        iid_k: cfg.iid_k(),
        strategy: s.name.label().into(),
        batch: s.batch.to_string(),
        fraction: s.fraction,
        epochs: s.epochs,
        lr: s.optimizer.lr,
        patience: cfg.stop.patience,
        max_round: cfg.stop.max_round,
        seed: cfg.seed,
        durations: cfg.durations.as_str().into(),
        lazy: cfg.lazy,
        aggregate_moments: s.aggregate_moments,
        n_clients: cfg.dataset.n_clients.unwrap_or(0),
        log_file: cfg.output.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        cell: cell.into(),
    }
}

fn options(cfg: &ExperimentConfig) -> RunOptions {
    RunOptions {
        network: cfg.network,
        stop: cfg.stop,
        durations: cfg.durations,
        seconds_per_flop: cfg.seconds_per_flop,
        lazy: cfg.lazy,
        quantize_on_wire: cfg.quantize_on_wire,
    }
}

fn build_spec(cfg: &ExperimentConfig, shape: [usize; 3], classes: usize) -> Result<ModelSpec, BenchError> {
    Ok(cfg.model.build(shape, classes)?)
}

/// Runs baselines (when enabled) and federated training for a resolved
/// config. Divergence is an error; see [`RunRecord`] for per-cell capture.
pub fn run_experiment(cfg: &ExperimentConfig, cell: &str) -> Result<RunRecord, BenchError> {
    let (clients, shape, classes) = load_clients(cfg)?;
    let spec = build_spec(cfg, shape, classes)?;
    let mut ctx = context(cfg, cell);
    ctx.n_clients = clients.len();
    let strategy = build(&cfg.strategy).map_err(|m| super::ConfigError {
        path: "strategy".into(),
        message: m,
    })?;
    let init = ParamVector::init(&spec, seed::mix_str(cfg.seed, "init")).map_err(crate::error::MetricError::from)?;
    let run = run_training(&spec, strategy.as_ref(), &clients, init, &options(cfg))?;
    let baselines = if cfg.baselines.enabled {
        Some(run_baselines(&spec, &clients, &cfg.baselines.train_config(cfg.seed))?)
    } else {
        None
    };
    let (fl_acc, per_client_acc) = fl_accuracy(&spec, &run.best_params, &clients)?;
    let acc = AccuracyReport {
        fl_acc,
        local_acc: baselines.as_ref().map(|b| b.local_acc),
        central_acc: baselines.as_ref().map(|b| b.central_acc),
        per_client_acc,
    };
    Ok(RunRecord {
        cell: cell.into(),
        status: RunStatus::Ok,
        error: None,
        created_at: now_rfc3339(),
        record: Some(compile_reports(&run, &ctx, &acc)),
        config: cfg.clone(),
    })
}

/// LocalAcc and CentralAcc alone.
pub fn run_baseline_record(cfg: &ExperimentConfig) -> Result<BaselineRecord, BenchError> {
    let (clients, shape, classes) = load_clients(cfg)?;
    let spec = build_spec(cfg, shape, classes)?;
    let b = run_baselines(&spec, &clients, &cfg.baselines.train_config(cfg.seed))?;
    Ok(BaselineRecord {
        created_at: now_rfc3339(),
        local_acc: b.local_acc,
        central_acc: b.central_acc,
        per_client_local: b.per_client_local,
        per_client_central: b.per_client_central,
        central_epochs: b.central_epochs,
        config: cfg.clone(),
    })
}

use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::AttackCampaignConfig;
use super::records::{append_line, now_rfc3339, RecordLine};
use super::run::load_pool;
use super::BenchError;
use crate::attacks::{
    capture_gradient, dump_attack_images, match_images, run_attack, victim_params, AttackKind, OracleClassifier,
    VictimUpdate,
};
use crate::data::{split_sizes, Dataset};
use crate::nn::{ModelSpec, OptimizerConfig};
use crate::seed;
use crate::strategy::{BatchSize, StrategyName};

/// One (attack, strategy, images, epochs, repeat) point of a campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackCell {
    pub key: String,
    pub attack: AttackKind,
    pub strategy: StrategyName,
    pub n_images: usize,
    pub epochs: usize,
    pub rep: usize,
}

impl AttackCell {
    fn slug(&self) -> String {
        format!(
            "{}-{}-n{}-e{}-s{}",
            self.attack.label().to_lowercase(),
            self.strategy.as_str(),
            self.n_images,
            self.epochs,
            self.rep
        )
    }
}

/// FedSGD victims take a single step, so they get one cell per image count.
pub fn attack_cells(cfg: &AttackCampaignConfig) -> Vec<AttackCell> {
    let mut cells = Vec::new();
    for &attack in &cfg.attacks {
        for &strategy in &cfg.strategies {
            let epochs: Vec<usize> = if strategy == StrategyName::Fedsgd {
                vec![1]
            } else {
                cfg.epochs.clone()
            };
            for &e in &epochs {
                for &n in &cfg.n_images {
                    for rep in 0..cfg.seeds {
                        cells.push(AttackCell {
                            key: format!(
                                "attack={} strategy={} n_images={n} E={e} rep={rep}",
                                attack.label(),
                                strategy.as_str()
                            ),
                            attack,
                            strategy,
                            n_images: n,
                            epochs: e,
                            rep,
                        });
                    }
                }
            }
        }
    }
    cells
}

/// Scored outcome of one attack cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub cell: String,
    pub attack: AttackKind,
    pub model: String,
    pub strategy: String,
    pub n_images: usize,
    pub epochs: usize,
    pub batch: BatchSize,
    pub victim_lr: f64,
    pub rep: usize,
    /// True when the attack produced nothing usable or errored.
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub label_accuracy: Option<f64>,
    /// Mean per-pixel squared error over matched pairs.
    pub l2_distance: Option<f64>,
    pub iterations: usize,
    pub final_objective: Option<f64>,
    pub method: String,
    pub approximate_gradient: bool,
    pub oracle_accuracy: Option<f64>,
    pub summary: String,
    pub created_at: String,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn summary_line(model: &str, cell: &AttackCell, acc: Option<f64>, l2: Option<f64>) -> String {
    let show = |v: Option<f64>| v.map_or("NaN".to_string(), |x| format!("{x:?}"));
    format!(
        "{}-{}-{} #Images={} #Epochs={} LabelAcc={} L2-Distance={}",
        cell.attack.label(),
        model,
        cell.strategy.label(),
        cell.n_images,
        cell.epochs,
        show(acc),
        show(l2)
    )
}

/// Everything cells share: the victim pool, the models and the oracle.
pub struct AttackTask {
    pub victims: Dataset,
    /// Model attacked analytically.
    pub spec: ModelSpec,
    /// Smooth variant attacked by gradient matching.
    pub smooth_spec: ModelSpec,
    pub oracle: Option<OracleClassifier>,
}

impl AttackTask {
    /// Loads the pool and trains the label oracle when an analytic attack
    /// is listed.
    pub fn prepare(cfg: &AttackCampaignConfig) -> Result<Self, BenchError> {
        let pool = load_pool(&cfg.dataset, cfg.seed)?;
        let (train_n, val_n, _) = split_sizes(pool.len());
        let idx = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
        let victims = pool.subset(&idx(train_n + val_n, pool.len()));
        if victims.len() < cfg.n_images.iter().copied().max().unwrap_or(0) {
            return Err(super::ConfigError {
                path: "n_images".into(),
                message: format!("only {} held-out images available", victims.len()),
            }
            .into());
        }
        let shape = pool.image_shape();
        let spec = cfg.model.build(shape, pool.n_classes)?;
        let oracle = if cfg.attacks.contains(&AttackKind::Fc) {
            let train = pool.subset(&idx(0, train_n));
            let val = pool.subset(&idx(train_n, train_n + val_n));
            let ospec = cfg.oracle.model.build(shape, pool.n_classes)?;
            Some(OracleClassifier::train(&ospec, &train, &val, &victims, &cfg.oracle.train)?)
        } else {
            None
        };
        Ok(Self {
            victims,
            smooth_spec: spec.for_gradient_attack(),
            spec,
            oracle,
        })
    }
}

/// Runs one cell; attack errors are recorded, not returned.
pub fn run_attack_cell(
    cfg: &AttackCampaignConfig,
    task: &AttackTask,
    cell: &AttackCell,
    dump_dir: Option<&Path>,
) -> AttackRecord {
    let model = cfg.model.label();
    let mut rec = AttackRecord {
        cell: cell.key.clone(),
        attack: cell.attack,
        model: model.into(),
        strategy: cell.strategy.label().into(),
        n_images: cell.n_images,
        epochs: cell.epochs,
        batch: cfg.batch,
        victim_lr: cfg.victim_lr,
        rep: cell.rep,
        failed: true,
        error: None,
        label_accuracy: None,
        l2_distance: None,
        iterations: 0,
        final_objective: None,
        method: String::new(),
        approximate_gradient: false,
        oracle_accuracy: task.oracle.as_ref().map(|o| o.test_accuracy),
        summary: String::new(),
        created_at: now_rfc3339(),
    };
    if let Err(e) = attack_into(cfg, task, cell, dump_dir, &mut rec) {
        rec.failed = true;
        rec.error = Some(e.to_string());
    }
    rec.summary = summary_line(model, cell, rec.label_accuracy, rec.l2_distance);
    rec
}

fn attack_into(
    cfg: &AttackCampaignConfig,
    task: &AttackTask,
    cell: &AttackCell,
    dump_dir: Option<&Path>,
    rec: &mut AttackRecord,
) -> Result<(), BenchError> {
    // Image choice and victim weights ignore the attack and strategy so
    // every attack sees the same victims.
    let mut order: Vec<usize> = (0..task.victims.len()).collect();
    let pick_seed = seed::mix_str(cfg.seed, &format!("victims n={} rep={}", cell.n_images, cell.rep));
    order.shuffle(&mut seed::rng(pick_seed));
    order.truncate(cell.n_images);
    let truth = task.victims.subset(&order);
    let spec = match cell.attack {
        AttackKind::Fc => &task.spec,
        AttackKind::Dlg => &task.smooth_spec,
    };
    let params = victim_params(spec, seed::mix_str(cfg.seed, &format!("victim rep={}", cell.rep)))?;
    let update = match cell.strategy {
        StrategyName::Fedavg => VictimUpdate::Fedavg {
            batch: cfg.batch,
            epochs: cell.epochs,
        },
        _ => VictimUpdate::Fedsgd,
    };
    let capture = capture_gradient(
        spec,
        &params,
        &truth.images,
        &truth.labels,
        update,
        OptimizerConfig::sgd(cfg.victim_lr),
        seed::mix_str(cfg.seed, &cell.key),
    )?;
    let result = run_attack(
        cell.attack,
        spec,
        &capture,
        &truth.images,
        &truth.labels,
        &cfg.settings,
        task.oracle.as_ref(),
    )?;
    rec.failed = result.failed;
    rec.label_accuracy = finite(result.label_accuracy);
    rec.l2_distance = finite(result.l2_distance);
    rec.iterations = result.iterations_used;
    rec.final_objective = result.final_objective.and_then(finite);
    rec.method = result.method;
    rec.approximate_gradient = result.approximate_gradient;
    if let Some(dir) = dump_dir {
        let [h, w, c] = truth.image_shape();
        if c == 1 {
            let recon: Vec<Vec<f64>> = result.reconstructed_images.iter().map(|t| t.data().to_vec()).collect();
            let matched = match_images(&recon, &truth.images)?;
            let path = dir.join(cell.slug());
            dump_attack_images(&path, &truth.images, &recon, &matched, h, w).map_err(|source| BenchError::Io { path, source })?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CampaignOutcome {
    /// One record per cell, in cell order.
    pub records: Vec<AttackRecord>,
    pub oracle_accuracy: Option<f64>,
}

/// Runs every cell on `jobs` workers, appending records to `out` through a
/// single writer and reporting each through `on_record`.
pub fn run_campaign(
    cfg: &AttackCampaignConfig,
    out: Option<&Path>,
    jobs: usize,
    dump_dir: Option<&Path>,
    on_record: impl Fn(&AttackRecord) + Sync,
) -> Result<CampaignOutcome, BenchError> {
    let task = AttackTask::prepare(cfg)?;
    let cells = attack_cells(cfg);
    let writer: Mutex<Option<BenchError>> = Mutex::new(None);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let records: Vec<AttackRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let rec = run_attack_cell(cfg, &task, cell, dump_dir);
                let mut err = writer.lock().expect("writer lock");
                if let Some(path) = out {
                    if let Err(e) = append_line(path, &RecordLine::Attack(rec.clone())) {
                        err.get_or_insert(e);
                    }
                }
                on_record(&rec);
                rec
            })
            .collect()
    });
    if let Some(e) = writer.into_inner().expect("writer lock") {
        return Err(e);
    }
    Ok(CampaignOutcome {
        records,
        oracle_accuracy: task.oracle.as_ref().map(|o| o.test_accuracy),
    })
}

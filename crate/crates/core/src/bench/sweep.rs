use std::collections::HashSet;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;

use super::config::{ConfigError, ExperimentConfig};
use super::records::{append_line, now_rfc3339, read_lines, RecordLine, RunRecord, RunStatus};
use super::run::run_experiment;
use super::BenchError;
use crate::metrics::format_hms;
use crate::seed;

/// One grid point with its derived seed and resolved config.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub key: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Cartesian product of the sweep axes. A cell's seed hashes the base seed
/// with its own axis values only, so growing an axis leaves other cells'
/// seeds alone.
pub fn sweep_cells(base: &ExperimentConfig) -> Result<Vec<SweepCell>, ConfigError> {
    let spec = base.sweep.clone().unwrap_or_default();
    let s = &base.strategy;
    let mut cells = Vec::new();
    for name in axis(&spec.strategy, s.name) {
        for batch in axis(&spec.batch, s.batch) {
            for fraction in axis(&spec.fraction, s.fraction) {
                for epochs in axis(&spec.epochs, s.epochs) {
                    for kind in axis(&spec.optimizer, s.optimizer.kind) {
                        for lr in axis(&spec.lr, s.optimizer.lr) {
                            for k in axis(&spec.k, base.dataset.k) {
                                for rep in 0..spec.repeats {
                                    let key = format!(
                                        "strategy={} B={batch} C={fraction} E={epochs} optimizer={} lr={lr} k={k} rep={rep}",
                                        name.as_str(),
                                        kind.as_str()
                                    );
                                    let cell_seed = seed::mix_str(base.seed, &key);
                                    let mut cfg = base.clone();
                                    cfg.sweep = None;
                                    cfg.strategy.name = name;
                                    cfg.strategy.batch = batch;
                                    cfg.strategy.fraction = fraction;
                                    cfg.strategy.epochs = epochs;
                                    cfg.strategy.optimizer.kind = kind;
                                    cfg.strategy.optimizer.lr = lr;
                                    cfg.dataset.k = k;
                                    let cfg = cfg.with_seed(cell_seed).resolve(Path::new("."))?;
                                    cells.push(SweepCell {
                                        key,
                                        seed: cell_seed,
                                        config: cfg,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Runs one cell, capturing failures in the record instead of returning them.
fn run_cell(cell: &SweepCell) -> RunRecord {
    match run_experiment(&cell.config, &cell.key) {
        Ok(r) => r,
        Err(e) => RunRecord {
            cell: cell.key.clone(),
            status: if matches!(e, BenchError::Diverged { .. }) {
                RunStatus::Diverged
            } else {
                RunStatus::Failed
            },
            error: Some(e.to_string()),
            created_at: now_rfc3339(),
            record: None,
            config: cell.config.clone(),
        },
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub total_cells: usize,
    pub skipped: usize,
    /// Records produced by this invocation, in completion order.
    pub new_records: Vec<RunRecord>,
    /// Every record now in the output file for this sweep.
    pub all_records: Vec<RunRecord>,
}

/// Runs every cell without a record in `out`, on `jobs` workers. Records
/// are appended as cells finish through a single writer.
pub fn run_sweep(
    base: &ExperimentConfig,
    out: &Path,
    jobs: usize,
    mut on_plan: impl FnMut(usize, usize),
) -> Result<SweepOutcome, BenchError> {
    let cells = sweep_cells(base)?;
    let done: HashSet<String> = existing_runs(out)?.into_iter().map(|r| r.cell).collect();
    let todo: Vec<&SweepCell> = cells.iter().filter(|c| !done.contains(&c.key)).collect();
    on_plan(cells.len(), cells.len() - todo.len());
    let writer = Mutex::new(Vec::new());
    let write_err: Mutex<Option<BenchError>> = Mutex::new(None);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        todo.par_iter().for_each(|cell| {
            let rec = run_cell(cell);
            let mut w = writer.lock().expect("writer lock");
            if let Err(e) = append_line(out, &RecordLine::Run(rec.clone())) {
                write_err.lock().expect("error lock").get_or_insert(e);
            }
            w.push(rec);
        })
    });
    if let Some(e) = write_err.into_inner().expect("error lock") {
        return Err(e);
    }
    let keys: HashSet<&str> = cells.iter().map(|c| c.key.as_str()).collect();
    let all_records = existing_runs(out)?
        .into_iter()
        .filter(|r| keys.contains(r.cell.as_str()))
        .collect();
    Ok(SweepOutcome {
        total_cells: cells.len(),
        skipped: cells.len() - todo.len(),
        new_records: writer.into_inner().expect("writer lock"),
        all_records,
    })
}

fn existing_runs(out: &Path) -> Result<Vec<RunRecord>, BenchError> {
    Ok(read_lines(out)?
        .into_iter()
        .filter_map(|l| match l {
            RecordLine::Run(r) => Some(r),
            _ => None,
        })
        .collect())
}

/// One line of a sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub fl_acc: f64,
    pub central_acc: Option<f64>,
    pub time_all_s: f64,
    pub comm_round: usize,
}

impl SummaryRow {
    fn within(&self, delta: f64) -> bool {
        self.central_acc
            .is_some_and(|c| crate::metrics::delta_accuracy_loss(self.fl_acc, c, delta))
    }
}

/// The fastest row among those with `|FLAcc − CentralAcc| < delta`, or the
/// most accurate row when none qualifies.
pub fn select_best(rows: &[SummaryRow], delta: f64) -> Option<usize> {
    let by_time = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.within(delta))
        .min_by(|a, b| a.1.time_all_s.total_cmp(&b.1.time_all_s));
    by_time
        .or_else(|| rows.iter().enumerate().max_by(|a, b| a.1.fl_acc.total_cmp(&b.1.fl_acc)))
        .map(|(i, _)| i)
}

pub fn summary_rows(records: &[RunRecord]) -> Vec<SummaryRow> {
    records
        .iter()
        .filter_map(|r| {
            let rec = r.record.as_ref()?;
            Some(SummaryRow {
                label: if r.cell.is_empty() {
                    format!("{} B={} C={} E={}", rec.strategy, rec.batch, rec.fraction, rec.epochs)
                } else {
                    r.cell.clone()
                },
                fl_acc: rec.fl_acc,
                central_acc: rec.central_acc,
                time_all_s: rec.time_all,
                comm_round: rec.comm_round,
            })
        })
        .collect()
}

/// Rows within the accuracy-loss tolerance sorted by TimeAll, then the rest
/// by accuracy; the selected row is starred.
pub fn render_summary(rows: &[SummaryRow], delta: f64) -> String {
    let best = select_best(rows, delta);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&rows[a], &rows[b]);
        rb.within(delta)
            .cmp(&ra.within(delta))
            .then_with(|| {
                if ra.within(delta) {
                    ra.time_all_s.total_cmp(&rb.time_all_s)
                } else {
                    rb.fl_acc.total_cmp(&ra.fl_acc)
                }
            })
    });
    let mut out = format!("{:<2}{:<8}{:<10}{:<10}{:<8}{}\n", "", "FLAcc", "Central", "TimeAll", "CR", "cell");
    for i in order {
        let r = &rows[i];
        out.push_str(&format!(
            "{:<2}{:<8.4}{:<10}{:<10}{:<8}{}\n",
            if Some(i) == best { "*" } else { "" },
            r.fl_acc,
            r.central_acc.map_or("-".into(), |c| format!("{c:.4}")),
            format_hms(r.time_all_s),
            r.comm_round,
            r.label
        ));
    }
    out
}

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{AccuracyReport, CommReport, TimeReport, MIB};
use crate::protocol::TrainingRun;

/// Experiment facts not contained in the training run itself.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordContext {
    pub dataset: String,
    pub model: String,
    pub optimizer: String,
    /// 0 for IID, otherwise classes per client.
    pub iid_k: usize,
    pub strategy: String,
    pub batch: String,
    pub fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub max_round: usize,
    pub seed: u64,
    pub durations: String,
    pub lazy: bool,
    pub aggregate_moments: bool,
    pub n_clients: usize,
    pub log_file: String,
    pub cell: String,
}

/// One flat result row. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActprRecord {
    pub dataset: String,
    pub model: String,
    pub optimizer: String,
    pub gradient_filter: String,
    #[serde(rename = "IID")]
    pub iid: usize,
    #[serde(rename = "IID-Strategy")]
    pub iid_strategy: String,
    pub compress: String,
    #[serde(rename = "compress-rate")]
    pub compress_rate: f64,
    #[serde(rename = "B")]
    pub batch: String,
    #[serde(rename = "C")]
    pub fraction: f64,
    #[serde(rename = "E")]
    pub epochs: usize,
    #[serde(rename = "LR")]
    pub lr: f64,
    #[serde(rename = "EarlyStopPatience")]
    pub patience: usize,
    #[serde(rename = "Device")]
    pub device: String,
    #[serde(rename = "LocalAcc")]
    pub local_acc: Option<f64>,
    #[serde(rename = "CentralAcc")]
    pub central_acc: Option<f64>,
    #[serde(rename = "FLAcc")]
    pub fl_acc: f64,
    /// Seconds.
    #[serde(rename = "TimeAll")]
    pub time_all: f64,
    #[serde(rename = "Time-Init")]
    pub time_init: f64,
    #[serde(rename = "Time-TrainReq")]
    pub time_train_req: f64,
    #[serde(rename = "Time-TrainRun")]
    pub time_train_run: f64,
    #[serde(rename = "Time-TrainSync")]
    pub time_train_sync: f64,
    #[serde(rename = "Time-TrainAgg")]
    pub time_train_agg: f64,
    #[serde(rename = "Time-ValReq")]
    pub time_val_req: f64,
    #[serde(rename = "Time-ValRun")]
    pub time_val_run: f64,
    #[serde(rename = "Time-ValSync")]
    pub time_val_sync: f64,
    #[serde(rename = "Time-ValAgg")]
    pub time_val_agg: f64,
    #[serde(rename = "CommRound")]
    pub comm_round: usize,
    /// Bytes.
    #[serde(rename = "CommAmount(Server Send)")]
    pub server_send: u64,
    #[serde(rename = "CommAmount(Server Receive)")]
    pub server_receive: u64,
    #[serde(rename = "LogFile")]
    pub log_file: String,
    pub strategy: String,
    pub seed: u64,
    pub durations: String,
    #[serde(rename = "MaxRound")]
    pub max_round: usize,
    pub stop_reason: String,
    pub best_round: usize,
    #[serde(rename = "TimeAll(h:m:s)")]
    pub time_all_hms: String,
    #[serde(rename = "TimeAll(ns)")]
    pub time_all_ns: u64,
    #[serde(rename = "CommAmount(Server Send MiB)")]
    pub server_send_mib: f64,
    #[serde(rename = "CommAmount(Server Receive MiB)")]
    pub server_receive_mib: f64,
    #[serde(rename = "CommAmount(Client Send Avg)")]
    pub client_send_avg: f64,
    #[serde(rename = "CommAmount(Client Receive Avg)")]
    pub client_receive_avg: f64,
    #[serde(rename = "FLAcc-split")]
    pub fl_acc_split: String,
    pub lazy: bool,
    pub aggregate_moments: bool,
    pub n_clients: usize,
    pub cell: String,
}

/// Column names in CSV order.
pub const CSV_COLUMNS: [&str; 48] = [
    "dataset",
    "model",
    "optimizer",
    "gradient_filter",
    "IID",
    "IID-Strategy",
    "compress",
    "compress-rate",
    "B",
    "C",
    "E",
    "LR",
    "EarlyStopPatience",
    "Device",
    "LocalAcc",
    "CentralAcc",
    "FLAcc",
    "TimeAll",
    "Time-Init",
    "Time-TrainReq",
    "Time-TrainRun",
    "Time-TrainSync",
    "Time-TrainAgg",
    "Time-ValReq",
    "Time-ValRun",
    "Time-ValSync",
    "Time-ValAgg",
    "CommRound",
    "CommAmount(Server Send)",
    "CommAmount(Server Receive)",
    "LogFile",
    "strategy",
    "seed",
    "durations",
    "MaxRound",
    "stop_reason",
    "best_round",
    "TimeAll(h:m:s)",
    "TimeAll(ns)",
    "CommAmount(Server Send MiB)",
    "CommAmount(Server Receive MiB)",
    "CommAmount(Client Send Avg)",
    "CommAmount(Client Receive Avg)",
    "FLAcc-split",
    "lazy",
    "aggregate_moments",
    "n_clients",
    "cell",
];

/// `h:mm:ss`, rounding to whole seconds.
pub fn format_hms(seconds: f64) -> String {
    let s = seconds.max(0.0).round() as u64;
    format!("{}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
}

pub fn compile_reports(run: &TrainingRun, ctx: &RecordContext, acc: &AccuracyReport) -> ActprRecord {
    let comm = CommReport::from_run(run);
    let time = TimeReport::from_run(run);
    let m = time.mean_substep_s;
    ActprRecord {
        dataset: ctx.dataset.clone(),
        model: ctx.model.clone(),
        optimizer: ctx.optimizer.clone(),
        gradient_filter: "None".into(),
        iid: ctx.iid_k,
        iid_strategy: if ctx.iid_k == 0 {
            "iid".into()
        } else {
            format!("{}-class", ctx.iid_k)
        },
        compress: "no-compress".into(),
        compress_rate: 1.0,
        batch: ctx.batch.clone(),
        fraction: ctx.fraction,
        epochs: ctx.epochs,
        lr: ctx.lr,
        patience: ctx.patience,
        device: "simulated".into(),
        local_acc: acc.local_acc,
        central_acc: acc.central_acc,
        fl_acc: acc.fl_acc,
        time_all: time.time_all_s,
        time_init: m[0],
        time_train_req: m[1],
        time_train_run: m[2],
        time_train_sync: m[3],
        time_train_agg: m[4],
        time_val_req: m[5],
        time_val_run: m[6],
        time_val_sync: m[7],
        time_val_agg: m[8],
        comm_round: comm.comm_round,
        server_send: comm.server_sent_bytes,
        server_receive: comm.server_received_bytes,
        log_file: ctx.log_file.clone(),
        strategy: ctx.strategy.clone(),
        seed: ctx.seed,
        durations: ctx.durations.clone(),
        max_round: ctx.max_round,
        stop_reason: run.stop_reason.as_str().into(),
        best_round: run.best_round,
        time_all_hms: format_hms(time.time_all_s),
        time_all_ns: time.time_all_ns,
        server_send_mib: comm.server_sent_bytes as f64 / MIB,
        server_receive_mib: comm.server_received_bytes as f64 / MIB,
        client_send_avg: comm.avg_client_sent_bytes,
        client_receive_avg: comm.avg_client_received_bytes,
        fl_acc_split: "test".into(),
        lazy: ctx.lazy,
        aggregate_moments: ctx.aggregate_moments,
        n_clients: ctx.n_clients,
        cell: ctx.cell.clone(),
    }
}

/// Writes records as CSV with a header row.
pub fn write_csv<W: Write>(out: W, records: &[ActprRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

use serde::{Deserialize, Serialize};

use super::clock::SimDuration;
use crate::nn::ParamVector;

/// Names of the nine per-round substeps, in workflow order.
pub const SUBSTEPS: [&str; 9] = [
    "Init", "TraReq", "TraRun", "TraSync", "TraAgg", "ValReq", "ValRun", "ValSync", "ValAgg",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substeps {
    pub init: SimDuration,
    pub tra_req: SimDuration,
    pub tra_run: SimDuration,
    pub tra_sync: SimDuration,
    pub tra_agg: SimDuration,
    pub val_req: SimDuration,
    pub val_run: SimDuration,
    pub val_sync: SimDuration,
    pub val_agg: SimDuration,
}

impl Substeps {
    pub fn as_array(&self) -> [SimDuration; 9] {
        [
            self.init,
            self.tra_req,
            self.tra_run,
            self.tra_sync,
            self.tra_agg,
            self.val_req,
            self.val_run,
            self.val_sync,
            self.val_agg,
        ]
    }

    pub fn total(&self) -> SimDuration {
        self.as_array().into_iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub durations: Substeps,
    pub bytes_server_sent: u64,
    pub bytes_server_received: u64,
    pub messages: usize,
    pub participating_clients: Vec<usize>,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxRound,
    /// Validation accuracy reached the configured target.
    TargetReached,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxRound => "max_round",
            StopReason::TargetReached => "target_reached",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub traces: Vec<RoundTrace>,
    pub stop_reason: StopReason,
    /// Global parameters with the lowest aggregated validation loss.
    pub best_params: ParamVector,
    /// Round that produced `best_params` (0 is the initial model).
    pub best_round: usize,
    pub final_params: ParamVector,
    pub client_bytes_sent: Vec<u64>,
    pub client_bytes_received: Vec<u64>,
}

impl TrainingRun {
    pub fn comm_round(&self) -> usize {
        self.traces.len()
    }

    pub fn time_all(&self) -> SimDuration {
        self.traces.iter().map(|t| t.durations.total()).sum()
    }

    pub fn server_sent(&self) -> u64 {
        self.traces.iter().map(|t| t.bytes_server_sent).sum()
    }

    pub fn server_received(&self) -> u64 {
        self.traces.iter().map(|t| t.bytes_server_received).sum()
    }
}

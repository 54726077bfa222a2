//! Accuracy, communication, time and robustness reports, and the flat
//! per-experiment record.

mod record;

pub use record::{compile_reports, format_hms, write_csv, ActprRecord, RecordContext, CSV_COLUMNS};

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::MetricError;
use crate::nn::{self, ModelSpec, ParamVector};
use crate::protocol::{TrainingRun, SUBSTEPS};

pub const MIB: f64 = 1024.0 * 1024.0;

/// Test accuracy of `params` on one client.
pub fn client_accuracy(spec: &ModelSpec, params: &ParamVector, client: &ClientDataset) -> Result<f64, MetricError> {
    let test = &client.test;
    if test.is_empty() {
        return Err(MetricError::EmptyTestSet(client.client_id));
    }
    let (_, correct) = nn::evaluate(spec, params, &test.images, &test.labels)?;
    Ok(correct as f64 / test.len() as f64)
}

/// `Σ p_k v_k` with `p_k = n_k / n` over training sizes.
pub fn weighted_by_train_size(clients: &[ClientDataset], values: &[f64]) -> f64 {
    let counts: Vec<usize> = clients.iter().map(ClientDataset::n_k).collect();
    weighted_accuracy(values, &counts)
}

/// `Σ p_k acc_k` with `p_k = n_k / Σ n_j`.
pub fn weighted_accuracy(accs: &[f64], n_k: &[usize]) -> f64 {
    let total: usize = n_k.iter().sum();
    if total == 0 {
        return f64::NAN;
    }
    accs.iter().zip(n_k).map(|(a, &n)| a * n as f64 / total as f64).sum()
}

/// FLAcc of one global model over every client's test set, with the
/// per-client accuracies.
pub fn fl_accuracy(spec: &ModelSpec, params: &ParamVector, clients: &[ClientDataset]) -> Result<(f64, Vec<f64>), MetricError> {
    let per_client = clients
        .iter()
        .map(|c| client_accuracy(spec, params, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((weighted_by_train_size(clients, &per_client), per_client))
}

/// `|FLAcc − CentralAcc| < δ`.
pub fn delta_accuracy_loss(fl_acc: f64, central_acc: f64, delta: f64) -> bool {
    (fl_acc - central_acc).abs() < delta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub fl_acc: f64,
    pub local_acc: Option<f64>,
    pub central_acc: Option<f64>,
    pub per_client_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub comm_round: usize,
    pub server_sent_bytes: u64,
    pub server_received_bytes: u64,
    pub avg_client_sent_bytes: f64,
    pub avg_client_received_bytes: f64,
}

impl CommReport {
    pub fn from_run(run: &TrainingRun) -> Self {
        let n = run.client_bytes_sent.len().max(1) as f64;
        Self {
            comm_round: run.comm_round(),
            server_sent_bytes: run.server_sent(),
            server_received_bytes: run.server_received(),
            avg_client_sent_bytes: run.client_bytes_sent.iter().sum::<u64>() as f64 / n,
            avg_client_received_bytes: run.client_bytes_received.iter().sum::<u64>() as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeReport {
    pub time_all_s: f64,
    pub time_all_ns: u64,
    /// Mean per-round seconds for each substep, in workflow order.
    pub mean_substep_s: [f64; 9],
}

impl TimeReport {
    pub fn from_run(run: &TrainingRun) -> Self {
        let rounds = run.comm_round();
        let mut sums = [0u64; 9];
        for t in &run.traces {
            for (s, d) in sums.iter_mut().zip(t.durations.as_array()) {
                *s += d.nanos();
            }
        }
        let mean_substep_s = sums.map(|s| if rounds == 0 { 0.0 } else { s as f64 / 1e9 / rounds as f64 });
        let total = run.time_all();
        Self {
            time_all_s: total.as_secs_f64(),
            time_all_ns: total.nanos(),
            mean_substep_s,
        }
    }

    pub fn substep(&self, name: &str) -> Option<f64> {
        SUBSTEPS.iter().position(|&s| s == name).map(|i| self.mean_substep_s[i])
    }
}

/// FLAcc of one strategy under one partition setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEntry {
    pub setting: String,
    pub strategy: String,
    pub fl_acc: f64,
    /// IID FLAcc minus this setting's FLAcc.
    pub delta_vs_iid: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub entries: Vec<RobustnessEntry>,
}

impl RobustnessReport {
    /// `results` holds `(setting, strategy, FLAcc)`; the setting named `iid`
    /// is the reference for each strategy.
    pub fn from_results(results: &[(String, String, f64)]) -> Self {
        let iid = |strategy: &str| {
            results
                .iter()
                .find(|(s, st, _)| s == "iid" && st == strategy)
                .map(|r| r.2)
        };
        Self {
            entries: results
                .iter()
                .map(|(setting, strategy, acc)| RobustnessEntry {
                    setting: setting.clone(),
                    strategy: strategy.clone(),
                    fl_acc: *acc,
                    delta_vs_iid: iid(strategy).map_or(f64::NAN, |i| i - acc),
                })
                .collect(),
        }
    }

    pub fn delta(&self, setting: &str, strategy: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.setting == setting && e.strategy == strategy)
            .map(|e| e.delta_vs_iid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_examples() {
        assert_eq!(weighted_accuracy(&[1.0, 0.0], &[50, 50]), 0.5);
        assert!((weighted_accuracy(&[0.9, 0.7], &[10, 30]) - 0.75).abs() < 1e-15);
        assert_eq!(weighted_accuracy(&[1.0, 1.0, 1.0], &[1, 2, 3]), 1.0);
    }

    #[test]
    fn delta_examples() {
        assert!(delta_accuracy_loss(0.983, 0.988, 0.01));
        assert!(!delta_accuracy_loss(0.90, 0.988, 0.01));
        assert!(delta_accuracy_loss(0.5, 0.5, 1e-12));
    }

    #[test]
    fn robustness_deltas() {
        let r = RobustnessReport::from_results(&[
            ("iid".into(), "FedAvg".into(), 0.98),
            ("1-class".into(), "FedAvg".into(), 0.90),
        ]);
        assert!((r.delta("1-class", "FedAvg").unwrap() - 0.08).abs() < 1e-12);
        assert_eq!(r.delta("iid", "FedAvg"), Some(0.0));
    }
}

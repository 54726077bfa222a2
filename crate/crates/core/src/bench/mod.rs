//! Config-driven experiment runner: single runs, grid sweeps, attack
//! campaigns and baseline runs, with JSON-lines and CSV output.

mod attack;
mod config;
mod records;
mod run;
mod sweep;

pub use attack::{attack_cells, run_attack_cell, run_campaign, AttackCell, AttackRecord, AttackTask, CampaignOutcome};
pub use config::{
    parse_toml, AttackCampaignConfig, BaselineConfig, ConfigError, DatasetConfig, ExperimentConfig, ModelConfig,
    ModelName, OracleConfig, SourceKind, SweepSpec, SCHEMA_VERSION,
};
pub use records::{append_line, now_rfc3339, read_lines, BaselineRecord, RecordLine, RunRecord, RunStatus};
pub use run::{load_clients, load_pool, run_baseline_record, run_experiment};
pub use sweep::{
    render_summary, run_sweep, select_best, summary_rows, sweep_cells, SummaryRow, SweepCell, SweepOutcome,
};

use std::path::PathBuf;

use crate::error::{AttackError, DataError, MetricError, ProtocolError};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged in round {round} (client {client:?})")]
    Diverged { round: usize, client: Option<usize> },
    #[error(transparent)]
    Protocol(ProtocolError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {reason}")]
    Record { path: PathBuf, line: usize, reason: String },
}

impl From<ProtocolError> for BenchError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Diverged { round, client } => BenchError::Diverged { round, client },
            other => BenchError::Protocol(other),
        }
    }
}

impl BenchError {
    /// Process exit code: 2 for configuration, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Diverged { .. } => 3,
            _ => 1,
        }
    }
}

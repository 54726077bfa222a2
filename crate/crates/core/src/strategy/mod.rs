//! FedSGD and FedAvg strategies, weighted aggregation, client selection and
//! the local-only / centralized baselines.

mod aggregate;
mod baselines;
mod clients;
mod config;

pub use aggregate::{aggregate, participant_count, select_clients, AggregationWeights};
pub use baselines::{run_baselines, train_centralized, Baselines, TrainConfig, TrainOutcome};
pub use clients::{client_update_fedavg, client_update_fedsgd, FedAvg, FedSgd, LocalTraining};
pub use config::{BatchSize, StrategyConfig, StrategyName};

use crate::protocol::FlStrategy;

/// Builds the federated strategy for a config; baselines are not federated.
pub fn build(config: &StrategyConfig) -> Result<Box<dyn FlStrategy>, String> {
    match config.name {
        StrategyName::Fedsgd => Ok(Box::new(FedSgd::new(config)?)),
        StrategyName::Fedavg => Ok(Box::new(FedAvg::new(config)?)),
        other => Err(format!("strategy.name `{}` is a baseline, not a federated strategy", other.as_str())),
    }
}

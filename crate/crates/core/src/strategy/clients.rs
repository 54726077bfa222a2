use rand::seq::SliceRandom;

use super::aggregate::{aggregate, select_clients, AggregationWeights};
use super::config::{BatchSize, StrategyConfig, StrategyName};
use crate::data::ClientDataset;
use crate::error::{NnError, ProtocolError};
use crate::nn::{self, Mode, ModelSpec, OptimizerState, ParamVector, Targets};
use crate::protocol::{ClientState, ClientUpdate, Downloaded, FlStrategy, ServerState};
use crate::seed;

fn client_seed(base: u64, tag: &str, round: usize, client: usize) -> u64 {
    seed::mix(seed::mix(seed::mix_str(base, tag), round as u64), client as u64)
}

/// Full-batch gradient of the client's training loss: `(loss, gradient)`.
pub fn client_update_fedsgd(
    spec: &ModelSpec,
    params: &ParamVector,
    client: &ClientDataset,
    seed: u64,
    round: usize,
) -> Result<(f64, ParamVector), NnError> {
    if client.train.is_empty() {
        return Err(NnError::Precondition(format!("client {} has no training data", client.client_id)));
    }
    let mode = Mode::Train {
        seed: client_seed(seed, "fedsgd-dropout", round, client.client_id),
    };
    let g = nn::gradients_with_mode(spec, params, &client.train.images, Targets::Classes(&client.train.labels), mode, false)?;
    Ok((g.loss, g.grad))
}

/// Output of local mini-batch training.
#[derive(Debug, Clone)]
pub struct LocalTraining {
    pub params: ParamVector,
    pub optimizer: OptimizerState,
    /// Mean mini-batch loss over all steps.
    pub loss: f64,
    pub steps: usize,
}

/// `epochs` passes of shuffled size-`batch` steps starting from `params`.
/// Batch order depends only on `(seed, round, client, epoch)`.
pub fn client_update_fedavg(
    spec: &ModelSpec,
    params: &ParamVector,
    client: &ClientDataset,
    batch: BatchSize,
    epochs: usize,
    optimizer: OptimizerState,
    seed: u64,
    round: usize,
) -> Result<LocalTraining, NnError> {
    let train = &client.train;
    if train.is_empty() {
        return Err(NnError::Precondition(format!("client {} has no training data", client.client_id)));
    }
    if epochs == 0 {
        return Err(NnError::Precondition("local epochs must be at least 1".into()));
    }
    let b = batch.resolve(train.len());
    let mut p = params.clone();
    let mut opt = optimizer;
    let order_seed = client_seed(seed, "fedavg-order", round, client.client_id);
    let drop_seed = client_seed(seed, "fedavg-dropout", round, client.client_id);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut loss_sum, mut steps) = (0.0, 0usize);
    for epoch in 0..epochs {
        if b < train.len() {
            order.shuffle(&mut seed::rng(seed::mix(order_seed, epoch as u64)));
        }
        for chunk in order.chunks(b) {
            let x = train.images.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mode = Mode::Train {
                seed: seed::mix(drop_seed, steps as u64),
            };
            let g = nn::gradients_with_mode(spec, &p, &x, Targets::Classes(&y), mode, false)?;
            opt.apply_in_place(&mut p, &g.grad)?;
            loss_sum += g.loss;
            steps += 1;
        }
    }
    Ok(LocalTraining {
        params: p,
        optimizer: opt,
        loss: loss_sum / steps as f64,
        steps,
    })
}

fn to_protocol(e: NnError) -> ProtocolError {
    ProtocolError::Nn(e)
}

/// Clients upload full-batch gradients; the server takes one optimizer step
/// on their `p_k`-weighted sum.
#[derive(Debug, Clone)]
pub struct FedSgd {
    config: StrategyConfig,
}

impl FedSgd {
    pub fn new(config: &StrategyConfig) -> Result<Self, String> {
        let config = StrategyConfig {
            name: StrategyName::Fedsgd,
            ..config.clone()
        }
        .resolved()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }
}

impl FlStrategy for FedSgd {
    fn select(&self, n_clients: usize, _round: usize) -> Vec<usize> {
        (0..n_clients).collect()
    }

    fn server_optimizer(&self, params: &ParamVector) -> OptimizerState {
        OptimizerState::new(self.config.optimizer, params)
    }

    fn client_update(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        _download: &Downloaded,
        _state: &ClientState,
        client: &ClientDataset,
        round: usize,
    ) -> Result<ClientUpdate, ProtocolError> {
        let (loss, grad) = client_update_fedsgd(spec, params, client, self.config.seed, round).map_err(to_protocol)?;
        Ok(ClientUpdate {
            payload: vec![grad],
            scalars: Vec::new(),
            loss,
            optimizer: None,
            flops: client.n_k() as f64 * spec.train_flops().map_err(to_protocol)?,
        })
    }

    fn aggregate(&self, server: &mut ServerState, updates: &[(usize, ClientUpdate)]) -> Result<f64, ProtocolError> {
        let counts: Vec<usize> = updates.iter().map(|(n, _)| *n).collect();
        let w = AggregationWeights::from_counts(&counts).map_err(to_protocol)?;
        let grads: Vec<&ParamVector> = updates.iter().map(|(_, u)| &u.payload[0]).collect();
        let g = aggregate(&grads, &w).map_err(to_protocol)?;
        server.optimizer.apply_in_place(&mut server.params, &g).map_err(to_protocol)?;
        let p = g.len() as f64;
        Ok(2.0 * p * updates.len() as f64 + 10.0 * p)
    }
}

/// Selected clients run local mini-batch epochs and upload weights; the
/// server averages them, and optionally the optimizer moments, by `p_k`.
#[derive(Debug, Clone)]
pub struct FedAvg {
    config: StrategyConfig,
}

impl FedAvg {
    pub fn new(config: &StrategyConfig) -> Result<Self, String> {
        let config = StrategyConfig {
            name: StrategyName::Fedavg,
            ..config.clone()
        }
        .resolved()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    fn moments(&self) -> usize {
        if self.config.aggregate_moments {
            self.config.optimizer.kind.n_moments()
        } else {
            0
        }
    }
}

impl FlStrategy for FedAvg {
    fn select(&self, n_clients: usize, round: usize) -> Vec<usize> {
        select_clients(n_clients, self.config.fraction, round, self.config.seed)
    }

    fn server_optimizer(&self, params: &ParamVector) -> OptimizerState {
        OptimizerState::new(self.config.optimizer, params)
    }

    fn download_moments(&self) -> usize {
        self.moments()
    }

    fn client_update(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        download: &Downloaded,
        state: &ClientState,
        client: &ClientDataset,
        round: usize,
    ) -> Result<ClientUpdate, ProtocolError> {
        let c = &self.config;
        let start = if self.moments() > 0 {
            OptimizerState {
                config: c.optimizer,
                moments: download.moments.clone(),
                step: download.step,
            }
        } else {
            state
                .optimizer
                .clone()
                .unwrap_or_else(|| OptimizerState::new(c.optimizer, params))
        };
        let out = client_update_fedavg(spec, params, client, c.batch, c.epochs, start, c.seed, round).map_err(to_protocol)?;
        let mut payload = vec![out.params];
        let mut scalars = Vec::new();
        if self.moments() > 0 {
            payload.extend(out.optimizer.moments.iter().cloned());
            scalars.push(out.optimizer.step as f64);
        }
        Ok(ClientUpdate {
            payload,
            scalars,
            loss: out.loss,
            optimizer: Some(out.optimizer),
            flops: (c.epochs * client.n_k()) as f64 * spec.train_flops().map_err(to_protocol)?,
        })
    }

    fn aggregate(&self, server: &mut ServerState, updates: &[(usize, ClientUpdate)]) -> Result<f64, ProtocolError> {
        let counts: Vec<usize> = updates.iter().map(|(n, _)| *n).collect();
        let w = AggregationWeights::from_counts(&counts).map_err(to_protocol)?;
        let vectors = updates.first().map_or(0, |(_, u)| u.payload.len());
        let mut flops = 0.0;
        for j in 0..vectors {
            let parts: Vec<&ParamVector> = updates.iter().map(|(_, u)| &u.payload[j]).collect();
            let merged = aggregate(&parts, &w).map_err(to_protocol)?;
            flops += 2.0 * merged.len() as f64 * parts.len() as f64;
            if j == 0 {
                server.params = merged;
            } else {
                server.optimizer.moments[j - 1] = merged;
            }
        }
        if self.moments() > 0 {
            server.optimizer.step = updates
                .iter()
                .filter_map(|(_, u)| u.scalars.first())
                .fold(0.0f64, |a, &b| a.max(b)) as u64;
        }
        Ok(flops)
    }
}

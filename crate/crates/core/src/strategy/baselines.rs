use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::BatchSize;
use crate::data::{ClientDataset, Dataset};
use crate::error::{MetricError, NnError};
use crate::metrics::{client_accuracy, weighted_by_train_size};
use crate::nn::{self, Mode, ModelSpec, OptimizerConfig, OptimizerState, ParamVector, Targets};
use crate::seed;

/// Non-federated training schedule used by the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch: BatchSize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (last epoch without validation data).
    pub params: ParamVector,
    pub epochs: usize,
    pub best_val_loss: f64,
}

/// Mini-batch training on one dataset with early stopping on `val` loss.
/// Full-batch SGD here matches a single-client FedSGD trajectory step for step.
pub fn train_centralized(spec: &ModelSpec, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, NnError> {
    if train.is_empty() {
        return Err(NnError::Precondition("training set is empty".into()));
    }
    let mut p = ParamVector::init(spec, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer, &p);
    let b = cfg.batch.resolve(train.len());
    let order_seed = seed::mix_str(cfg.seed, "central-order");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, p.clone());
    let mut since_best = 0;
    let mut epochs = 0;
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs {
        epochs = epoch + 1;
        if b < train.len() {
            order.shuffle(&mut seed::rng(seed::mix(order_seed, epoch as u64)));
        }
        for chunk in order.chunks(b) {
            let mode = Mode::Train {
                seed: seed::mix(seed::mix_str(cfg.seed, "central-dropout"), step),
            };
            let g = if chunk.len() == train.len() {
                nn::gradients_with_mode(spec, &p, &train.images, Targets::Classes(&train.labels), mode, false)?
            } else {
                let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                nn::gradients_with_mode(spec, &p, &train.images.select_rows(chunk), Targets::Classes(&y), mode, false)?
            };
            opt.apply_in_place(&mut p, &g.grad)?;
            step += 1;
        }
        if val.is_empty() {
            best = (f64::NAN, p.clone());
            continue;
        }
        let (loss, _) = nn::evaluate(spec, &p, &val.images, &val.labels)?;
        if loss < best.0 {
            best = (loss, p.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    if cfg.max_epochs == 0 {
        best.1 = p;
    }
    Ok(TrainOutcome {
        params: best.1,
        epochs,
        best_val_loss: best.0,
    })
}

#[derive(Debug, Clone)]
pub struct Baselines {
    pub local_acc: f64,
    pub central_acc: f64,
    pub per_client_local: Vec<f64>,
    pub per_client_central: Vec<f64>,
    pub central_params: ParamVector,
    pub central_epochs: usize,
}

/// LocalAcc: each client trains alone and is tested on its own test set.
/// CentralAcc: one model on the pooled training data, tested per client.
/// Both average per-client accuracies with `p_k = n_k / n`.
pub fn run_baselines(spec: &ModelSpec, clients: &[ClientDataset], cfg: &TrainConfig) -> Result<Baselines, MetricError> {
    if clients.is_empty() {
        return Err(MetricError::Nn(NnError::Precondition("no clients".into())));
    }
    let per_client_local = clients
        .par_iter()
        .map(|c| {
            let out = train_centralized(spec, &c.train, &c.val, cfg)?;
            client_accuracy(spec, &out.params, c)
        })
        .collect::<Result<Vec<f64>, MetricError>>()?;

    let trains: Vec<&Dataset> = clients.iter().map(|c| &c.train).collect();
    let vals: Vec<&Dataset> = clients.iter().filter(|c| !c.val.is_empty()).map(|c| &c.val).collect();
    let invalid = |e: crate::error::DataError| MetricError::Nn(NnError::Config(e.to_string()));
    let pooled_train = Dataset::concat(&trains).map_err(invalid)?;
    let pooled_val = if vals.is_empty() {
        Dataset::empty(pooled_train.image_shape(), pooled_train.n_classes)
    } else {
        Dataset::concat(&vals).map_err(invalid)?
    };
    let central = train_centralized(spec, &pooled_train, &pooled_val, cfg)?;
    let per_client_central = clients
        .iter()
        .map(|c| client_accuracy(spec, &central.params, c))
        .collect::<Result<Vec<f64>, MetricError>>()?;

    Ok(Baselines {
        local_acc: weighted_by_train_size(clients, &per_client_local),
        central_acc: weighted_by_train_size(clients, &per_client_central),
        per_client_local,
        per_client_central,
        central_params: central.params,
        central_epochs: central.epochs,
    })
}

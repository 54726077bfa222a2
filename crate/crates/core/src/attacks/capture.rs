use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Dataset};
use crate::error::AttackError;
use crate::nn::{self, ModelSpec, OptimizerConfig, OptimizerKind, OptimizerState, ParamVector, Targets, Tensor};
use crate::strategy::{client_update_fedavg, BatchSize};

/// Two adjacent parameter snapshots and the gradient recovered from them.
#[derive(Debug, Clone)]
pub struct GradientCapture {
    pub params_before: ParamVector,
    pub params_after: ParamVector,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub derived_gradient: ParamVector,
    /// True when the update rule is not plain SGD, so the derived vector is
    /// only the effective update direction.
    pub approximate: bool,
    pub n_images: usize,
    pub epochs: usize,
}

/// How the victim client turns its images into the next parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum VictimUpdate {
    /// One full-batch step.
    Fedsgd,
    /// `epochs` passes of size-`batch` steps.
    Fedavg { batch: BatchSize, epochs: usize },
}

/// `(before − after) / lr`, flagged approximate for stateful optimizers.
pub fn derive_gradient(
    before: &ParamVector,
    after: &ParamVector,
    optimizer: &OptimizerConfig,
) -> Result<(ParamVector, bool), AttackError> {
    if !(optimizer.lr > 0.0) {
        return Err(AttackError::Config(format!(
            "cannot derive a gradient with learning rate {}",
            optimizer.lr
        )));
    }
    let mut g = before.sub(after)?;
    for v in g.values_mut() {
        *v /= optimizer.lr;
    }
    Ok((g, optimizer.kind != OptimizerKind::Sgd))
}

/// Runs the victim's local update on `(images, labels)` from `params` and
/// derives the gradient an observer of both snapshots would see.
pub fn capture_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    images: &Tensor,
    labels: &[usize],
    update: VictimUpdate,
    optimizer: OptimizerConfig,
    seed: u64,
) -> Result<GradientCapture, AttackError> {
    optimizer.validate().map_err(AttackError::Config)?;
    let n_classes = spec.n_classes()?;
    let (after, epochs) = match update {
        VictimUpdate::Fedsgd => {
            let (_, g) = nn::gradients(spec, params, images, Targets::Classes(labels))?;
            let (p, _) = OptimizerState::new(optimizer, params).apply(params, &g)?;
            (p, 1)
        }
        VictimUpdate::Fedavg { batch, epochs } => {
            let train = Dataset::new(images.clone(), labels.to_vec(), n_classes)
                .map_err(|e| AttackError::Config(e.to_string()))?;
            let shape = train.image_shape();
            let client = ClientDataset {
                client_id: 0,
                train,
                val: Dataset::empty(shape, n_classes),
                test: Dataset::empty(shape, n_classes),
                source: None,
            };
            let state = OptimizerState::new(optimizer, params);
            let out = client_update_fedavg(spec, params, &client, batch, epochs, state, seed, 0)?;
            (out.params, epochs)
        }
    };
    let (derived_gradient, approximate) = derive_gradient(params, &after, &optimizer)?;
    Ok(GradientCapture {
        params_before: params.clone(),
        params_after: after,
        lr: optimizer.lr,
        optimizer: optimizer.kind,
        derived_gradient,
        approximate,
        n_images: images.rows(),
        epochs,
    })
}

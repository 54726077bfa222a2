use serde::{Deserialize, Serialize};

use super::Reconstruction;
use crate::error::AttackError;
use crate::nn::{Layer, ModelSpec, ParamVector};

/// Thresholds for the analytic attack on the first dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcConfig {
    /// Units whose bias gradient is at most this (in magnitude) are ignored.
    pub bias_floor: f64,
    /// Candidates closer than this per-pixel MSE join the same cluster.
    pub merge_mse: f64,
    /// A cluster is skipped when its distance to the span of the already
    /// chosen images is below this fraction of its norm.
    pub span_tolerance: f64,
}

impl Default for FcConfig {
    fn default() -> Self {
        Self {
            bias_floor: 1e-8,
            merge_mse: 1e-3,
            span_tolerance: 0.2,
        }
    }
}

/// Index of the first parameterized layer, which must be dense.
pub fn first_dense_layer(spec: &ModelSpec) -> Result<usize, AttackError> {
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            Layer::Flatten | Layer::Dropout { .. } => continue,
            Layer::Dense { .. } => return Ok(i),
            other => {
                return Err(AttackError::Config(format!(
                    "analytic attack needs a dense first layer, found {other:?}"
                )))
            }
        }
    }
    Err(AttackError::Config("model has no dense layer".into()))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Image implied by one first-layer unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FcCandidate {
    pub unit: usize,
    /// Weight-gradient row over bias gradient, clipped to [0, 1].
    pub image: Vec<f64>,
    /// Mean amount by which the unclipped ratio left [0, 1].
    pub out_of_range: f64,
}

/// One candidate per unit whose bias gradient exceeds the floor.
pub fn fc_candidates(grad: &ParamVector, spec: &ModelSpec, config: &FcConfig) -> Result<Vec<FcCandidate>, AttackError> {
    let li = first_dense_layer(spec)?;
    let Some((gw, gb)) = grad.layer(li) else {
        return Err(AttackError::Config("gradient layout does not match the model".into()));
    };
    let width = spec.input_len();
    Ok(gb
        .iter()
        .enumerate()
        .filter(|(_, b)| b.abs() > config.bias_floor)
        .map(|(unit, &b)| {
            let raw: Vec<f64> = gw[unit * width..(unit + 1) * width].iter().map(|w| w / b).collect();
            let out_of_range = raw.iter().map(|v| (v - 1.0).max(0.0) + (-v).max(0.0)).sum::<f64>() / width as f64;
            FcCandidate {
                unit,
                image: raw.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                out_of_range,
            }
        })
        .collect())
}

struct Cluster {
    image: Vec<f64>,
    size: usize,
    out_of_range: f64,
}

/// Recovers up to `max_images` inputs from a gradient of the first dense
/// layer: each active unit's weight-gradient row divided by its bias
/// gradient is a (mixture of) input image(s).
pub fn fc_attack(
    grad: &ParamVector,
    spec: &ModelSpec,
    max_images: usize,
    config: &FcConfig,
) -> Result<Reconstruction, AttackError> {
    let mut clusters: Vec<Cluster> = Vec::new();
    for cand in fc_candidates(grad, spec, config)? {
        match clusters.iter_mut().find(|c| mse(&c.image, &cand.image) < config.merge_mse) {
            Some(c) => {
                c.size += 1;
                c.out_of_range = c.out_of_range.min(cand.out_of_range);
            }
            None => clusters.push(Cluster {
                image: cand.image,
                size: 1,
                out_of_range: cand.out_of_range,
            }),
        }
    }
    if clusters.is_empty() {
        return Ok(Reconstruction::failed(0, None));
    }
    clusters.sort_by(|a, b| b.size.cmp(&a.size).then(a.out_of_range.total_cmp(&b.out_of_range)));

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut images = Vec::new();
    for c in clusters {
        if images.len() == max_images {
            break;
        }
        let norm = c.image.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut residual = c.image.clone();
        for q in &basis {
            let proj: f64 = q.iter().zip(&residual).map(|(a, b)| a * b).sum();
            residual.iter_mut().zip(q).for_each(|(r, qi)| *r -= proj * qi);
        }
        let rnorm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm < config.span_tolerance * norm || rnorm == 0.0 {
            continue;
        }
        basis.push(residual.into_iter().map(|v| v / rnorm).collect());
        images.push(c.image);
    }
    Ok(Reconstruction {
        images,
        labels: None,
        failed: false,
        iterations: 0,
        final_objective: None,
        history: Vec::new(),
        method: "analytic".into(),
    })
}

use serde::{Deserialize, Serialize};

use super::Reconstruction;
use crate::data::Dataset;
use crate::error::AttackError;
use crate::nn::{self, ModelSpec, ParamVector, Tensor};
use crate::strategy::{train_centralized, TrainConfig};

/// Minimum held-out accuracy for the label oracle.
pub const ORACLE_MIN_ACCURACY: f64 = 0.95;

/// Centrally trained classifier that labels reconstructed images.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub test_accuracy: f64,
}

impl OracleClassifier {
    /// Trains with best-validation-loss checkpointing and rejects models
    /// below [`ORACLE_MIN_ACCURACY`] on `test`.
    pub fn train(
        spec: &ModelSpec,
        train: &Dataset,
        val: &Dataset,
        test: &Dataset,
        cfg: &TrainConfig,
    ) -> Result<Self, AttackError> {
        let out = train_centralized(spec, train, val, cfg)?;
        let (_, correct) = nn::evaluate(spec, &out.params, &test.images, &test.labels)?;
        let oracle = Self {
            spec: spec.clone(),
            params: out.params,
            test_accuracy: correct as f64 / test.len().max(1) as f64,
        };
        oracle.check()?;
        Ok(oracle)
    }

    pub fn check(&self) -> Result<(), AttackError> {
        if self.test_accuracy >= ORACLE_MIN_ACCURACY {
            Ok(())
        } else {
            Err(AttackError::Config(format!(
                "label oracle reached {:.4} test accuracy, needs {ORACLE_MIN_ACCURACY}",
                self.test_accuracy
            )))
        }
    }

    pub fn predict(&self, images: &[Vec<f64>]) -> Result<Vec<usize>, AttackError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
        let batch = Tensor::from_rows(&self.spec.input, &rows)?;
        Ok(nn::predict(&self.spec, &self.params, &batch)?)
    }
}

/// Where reconstructed labels come from.
#[derive(Debug, Clone, Copy)]
pub enum LabelSource<'a> {
    /// Labels produced by the attack itself.
    Reconstructed,
    Oracle(&'a OracleClassifier),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    /// Correct matched labels over the number of true images.
    pub label_accuracy: f64,
    /// Mean per-pixel squared error over matched pairs; NaN with nothing
    /// to match.
    pub l2_distance: f64,
}

/// Per-pixel squared error between two images.
pub fn pixel_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Minimum-cost one-to-one assignment of reconstructions (rows) to truth
/// images (columns); returns the column for each row.
pub fn match_images(recon: &[Vec<f64>], truth: &Tensor) -> Result<Vec<usize>, AttackError> {
    if recon.len() > truth.rows() {
        return Err(AttackError::Config(format!(
            "{} reconstructions for {} true images",
            recon.len(),
            truth.rows()
        )));
    }
    if recon.is_empty() {
        return Ok(Vec::new());
    }
    let mut cost = Vec::with_capacity(recon.len());
    for r in recon {
        if r.len() != truth.row_len() {
            return Err(AttackError::Config("reconstruction and truth image sizes differ".into()));
        }
        cost.push((0..truth.rows()).map(|j| pixel_mse(r, truth.row(j))).collect());
    }
    Ok(assign_min_cost(&cost))
}

/// Hungarian method with potentials for an `n × m` cost matrix, `n ≤ m`.
/// Returns the column assigned to each row.
pub fn assign_min_cost(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows than columns");
    // 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Label accuracy and matched L2 of a reconstruction.
pub fn score_attack(
    recon: &Reconstruction,
    truth: &Tensor,
    truth_labels: &[usize],
    labels: LabelSource<'_>,
) -> Result<AttackScore, AttackError> {
    if truth_labels.len() != truth.rows() || truth.rows() == 0 {
        return Err(AttackError::Config("truth labels do not match truth images".into()));
    }
    let assignment = match_images(&recon.images, truth)?;
    let predicted = match labels {
        LabelSource::Reconstructed => recon
            .labels
            .clone()
            .ok_or_else(|| AttackError::Config("attack produced no labels".into()))?,
        LabelSource::Oracle(oracle) => {
            oracle.check()?;
            oracle.predict(&recon.images)?
        }
    };
    let correct = assignment
        .iter()
        .zip(&predicted)
        .filter(|(&j, &y)| truth_labels[j] == y)
        .count();
    let l2_distance = if assignment.is_empty() {
        f64::NAN
    } else {
        assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| pixel_mse(&recon.images[i], truth.row(j)))
            .sum::<f64>()
            / assignment.len() as f64
    };
    Ok(AttackScore {
        label_accuracy: correct as f64 / truth.rows() as f64,
        l2_distance,
    })
}

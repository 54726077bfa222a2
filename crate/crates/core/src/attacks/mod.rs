//! Gradient-inversion attacks on a single client's update: the analytic
//! attack on the first dense layer and gradient matching on dummy inputs.

mod capture;
mod dlg;
mod fc;
mod pgm;
mod score;

pub use capture::{capture_gradient, derive_gradient, GradientCapture, VictimUpdate};
pub use dlg::{
    dlg_attack, dlg_gradient_analytic, dlg_gradient_fd, dlg_objective, random_state, DlgConfig, DlgState,
    GradientPath,
};
pub use fc::{fc_attack, fc_candidates, first_dense_layer, FcCandidate, FcConfig};
pub use pgm::{dump_attack_images, write_pgm};
pub use score::{assign_min_cost, match_images, pixel_mse, score_attack, AttackScore, LabelSource, OracleClassifier, ORACLE_MIN_ACCURACY};

use serde::{Deserialize, Serialize};

use crate::error::AttackError;
use crate::nn::{ModelSpec, ParamVector, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fc,
    Dlg,
}

impl AttackKind {
    pub fn label(self) -> &'static str {
        match self {
            AttackKind::Fc => "FC",
            AttackKind::Dlg => "DLG",
        }
    }
}

/// Raw attack output, in no particular order relative to the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Flattened images with values in [0, 1].
    pub images: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub failed: bool,
    pub iterations: usize,
    pub final_objective: Option<f64>,
    /// Objective after every accepted step, starting with the initial value.
    pub history: Vec<f64>,
    /// Solver used, e.g. `lbfgs-backtracking/analytic`.
    pub method: String,
}

impl Reconstruction {
    pub fn failed(iterations: usize, final_objective: Option<f64>) -> Self {
        Self {
            images: Vec::new(),
            labels: None,
            failed: true,
            iterations,
            final_objective,
            history: Vec::new(),
            method: String::new(),
        }
    }
}

/// Scored reconstruction.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub attack: AttackKind,
    pub reconstructed_images: Vec<Tensor>,
    pub reconstructed_labels: Vec<usize>,
    pub label_accuracy: f64,
    pub l2_distance: f64,
    pub failed: bool,
    pub iterations_used: usize,
    pub final_objective: Option<f64>,
    pub method: String,
    /// Gradient came from a stateful optimizer.
    pub approximate_gradient: bool,
}

/// Settings shared by every attack cell.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub fc: FcConfig,
    pub dlg: DlgConfig,
}

/// Attacks the capture of `truth` and scores the result. FC labels come
/// from `oracle`, DLG labels from the attack.
pub fn run_attack(
    kind: AttackKind,
    spec: &ModelSpec,
    capture: &GradientCapture,
    truth: &Tensor,
    truth_labels: &[usize],
    settings: &AttackSettings,
    oracle: Option<&OracleClassifier>,
) -> Result<AttackResult, AttackError> {
    let recon = match kind {
        AttackKind::Fc => fc_attack(&capture.derived_gradient, spec, truth.rows(), &settings.fc)?,
        AttackKind::Dlg => dlg_attack(
            &capture.derived_gradient,
            spec,
            &capture.params_before,
            truth.rows(),
            &settings.dlg,
            None,
        )?,
    };
    let source = match kind {
        AttackKind::Fc => LabelSource::Oracle(
            oracle.ok_or_else(|| AttackError::Config("the analytic attack needs a label oracle".into()))?,
        ),
        AttackKind::Dlg => LabelSource::Reconstructed,
    };
    let score = score_attack(&recon, truth, truth_labels, source)?;
    let reconstructed_labels = match (&recon.labels, source) {
        (Some(l), _) => l.clone(),
        (None, LabelSource::Oracle(o)) => o.predict(&recon.images)?,
        (None, LabelSource::Reconstructed) => Vec::new(),
    };
    let reconstructed_images = recon
        .images
        .iter()
        .map(|v| Tensor::new(spec.input.to_vec(), v.clone()))
        .collect::<Result<_, _>>()?;
    Ok(AttackResult {
        attack: kind,
        reconstructed_images,
        reconstructed_labels,
        label_accuracy: score.label_accuracy,
        l2_distance: score.l2_distance,
        failed: recon.failed,
        iterations_used: recon.iterations,
        final_objective: recon.final_objective,
        method: recon.method,
        approximate_gradient: capture.approximate,
    })
}

/// Parameters the victim starts from.
pub fn victim_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector, AttackError> {
    Ok(ParamVector::init(spec, crate::seed::mix_str(seed, "victim-init"))?)
}

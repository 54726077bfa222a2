use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Reconstruction;
use crate::error::AttackError;
use crate::nn::engine::softmax_rows;
use crate::nn::{self, Layer, ModelSpec, ParamVector, Targets, Tensor};
use crate::seed;

/// How the descent direction on the dummy inputs is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientPath {
    /// Analytic when the model is dense-only and the spot check passes.
    Auto,
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DlgConfig {
    /// Iterations per reconstructed image.
    pub iterations_per_image: usize,
    /// Initial step size; adapted by backtracking.
    pub lr: f64,
    pub init_seed: u64,
    /// Stop as soon as the objective falls to this value.
    pub tolerance: f64,
    /// Consecutive rejected steps before giving up.
    pub patience: usize,
    /// Curvature pairs kept for quasi-Newton directions; 0 is plain
    /// gradient descent.
    pub memory: usize,
    pub fd_epsilon: f64,
    pub gradient: GradientPath,
    /// Coordinates compared against finite differences before trusting the
    /// analytic path.
    pub check_coordinates: usize,
    pub check_tolerance: f64,
}

impl Default for DlgConfig {
    fn default() -> Self {
        Self {
            iterations_per_image: 64,
            lr: 1.0,
            init_seed: 0,
            tolerance: 1e-12,
            patience: 100,
            memory: 10,
            fd_epsilon: 1e-4,
            gradient: GradientPath::Auto,
            check_coordinates: 16,
            check_tolerance: 1e-3,
        }
    }
}

/// Dummy batch: images `[n, input]` and label logits `[n, classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DlgState {
    pub images: Vec<f64>,
    pub logits: Vec<f64>,
}

struct Problem<'a> {
    spec: &'a ModelSpec,
    params: &'a ParamVector,
    target: &'a ParamVector,
    n: usize,
    width: usize,
    classes: usize,
}

impl Problem<'_> {
    fn targets(&self, logits: &[f64]) -> Vec<f64> {
        let mut t = logits.to_vec();
        softmax_rows(&mut t, self.classes);
        t
    }

    fn dummy_gradient(&self, s: &DlgState) -> Result<ParamVector, AttackError> {
        let mut shape = vec![self.n];
        shape.extend_from_slice(&self.spec.input);
        let x = Tensor::new(shape, s.images.clone())?;
        let t = Tensor::new(vec![self.n, self.classes], self.targets(&s.logits))?;
        let (_, g) = nn::gradients(self.spec, self.params, &x, Targets::Soft(&t))?;
        Ok(g)
    }

    fn objective(&self, s: &DlgState) -> Result<f64, AttackError> {
        Ok(self.dummy_gradient(s)?.squared_distance(self.target)?)
    }

    fn n_vars(&self) -> usize {
        self.n * (self.width + self.classes)
    }

    fn perturbed(&self, s: &DlgState, coord: usize, delta: f64) -> DlgState {
        let mut p = s.clone();
        let split = self.n * self.width;
        if coord < split {
            p.images[coord] += delta;
        } else {
            p.logits[coord - split] += delta;
        }
        p
    }

    fn fd_coordinate(&self, s: &DlgState, coord: usize, eps: f64) -> Result<f64, AttackError> {
        let up = self.objective(&self.perturbed(s, coord, eps))?;
        let down = self.objective(&self.perturbed(s, coord, -eps))?;
        Ok((up - down) / (2.0 * eps))
    }

    fn fd_gradient(&self, s: &DlgState, eps: f64) -> Result<Vec<f64>, AttackError> {
        (0..self.n_vars()).into_par_iter().map(|c| self.fd_coordinate(s, c, eps)).collect()
    }

    /// Gradient of the objective by differentiating the directional
    /// derivative of the loss along the residual.
    fn analytic_gradient(&self, s: &DlgState) -> Result<Vec<f64>, AttackError> {
        let residual = self.dummy_gradient(s)?.sub(self.target)?;
        let n = self.n;
        let inv_n = 1.0 / n as f64;

        struct Saved {
            li: usize,
            pre: Vec<f64>,
            tangent_pre: Vec<f64>,
            inputs: usize,
            outputs: usize,
            activation: crate::nn::Activation,
        }
        let mut saved = Vec::new();
        let mut a = s.images.clone();
        let mut a_dot = vec![0.0; a.len()];
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let Layer::Dense {
                inputs,
                outputs,
                activation,
            } = *layer
            else {
                continue;
            };
            let (w, b) = self.params.layer(li).expect("dense layer has params");
            let (dw, db) = residual.layer(li).expect("dense layer has params");
            let mut z = vec![0.0; n * outputs];
            let mut z_dot = vec![0.0; n * outputs];
            for smp in 0..n {
                let x = &a[smp * inputs..(smp + 1) * inputs];
                let xd = &a_dot[smp * inputs..(smp + 1) * inputs];
                for o in 0..outputs {
                    let wr = &w[o * inputs..(o + 1) * inputs];
                    let dwr = &dw[o * inputs..(o + 1) * inputs];
                    z[smp * outputs + o] = b[o] + dot(wr, x);
                    z_dot[smp * outputs + o] = db[o] + dot(dwr, x) + dot(wr, xd);
                }
            }
            let next: Vec<f64> = z.iter().map(|&v| activation.apply(v)).collect();
            let next_dot: Vec<f64> = z.iter().zip(&z_dot).map(|(&v, &d)| activation.derivative(v) * d).collect();
            a = next;
            saved.push(Saved {
                li,
                pre: z,
                tangent_pre: z_dot,
                inputs,
                outputs,
                activation,
            });
            a_dot = next_dot;
        }

        let k = self.classes;
        let mut p = a.clone();
        softmax_rows(&mut p, k);
        let t = self.targets(&s.logits);
        let mut adj_a = vec![0.0; n * k];
        let mut adj_a_dot = vec![0.0; n * k];
        let mut grad_logits = vec![0.0; n * k];
        for smp in 0..n {
            let r = smp * k..(smp + 1) * k;
            let (pr, tr, ad) = (&p[r.clone()], &t[r.clone()], &a_dot[r.clone()]);
            let p_dot: f64 = pr.iter().zip(ad).map(|(x, y)| x * y).sum();
            let adj_t: Vec<f64> = ad.iter().map(|v| -v * inv_n).collect();
            let t_adj: f64 = tr.iter().zip(&adj_t).map(|(x, y)| x * y).sum();
            for j in 0..k {
                adj_a[smp * k + j] = pr[j] * (ad[j] - p_dot) * inv_n;
                adj_a_dot[smp * k + j] = (pr[j] - tr[j]) * inv_n;
                grad_logits[smp * k + j] = 2.0 * tr[j] * (adj_t[j] - t_adj);
            }
        }

        for l in saved.iter().rev() {
            let (w, _) = self.params.layer(l.li).expect("dense layer has params");
            let (dw, _) = residual.layer(l.li).expect("dense layer has params");
            let (ni, no) = (l.inputs, l.outputs);
            let mut adj_z = vec![0.0; n * no];
            let mut adj_z_dot = vec![0.0; n * no];
            for i in 0..n * no {
                let (z, zd) = (l.pre[i], l.tangent_pre[i]);
                let d1 = l.activation.derivative(z);
                adj_z[i] = d1 * adj_a[i] + l.activation.second_derivative(z) * zd * adj_a_dot[i];
                adj_z_dot[i] = d1 * adj_a_dot[i];
            }
            let mut prev = vec![0.0; n * ni];
            let mut prev_dot = vec![0.0; n * ni];
            for smp in 0..n {
                let out = &mut prev[smp * ni..(smp + 1) * ni];
                let out_dot = &mut prev_dot[smp * ni..(smp + 1) * ni];
                for o in 0..no {
                    let (az, azd) = (adj_z[smp * no + o], adj_z_dot[smp * no + o]);
                    let wr = &w[o * ni..(o + 1) * ni];
                    let dwr = &dw[o * ni..(o + 1) * ni];
                    for i in 0..ni {
                        out[i] += wr[i] * az + dwr[i] * azd;
                        out_dot[i] += wr[i] * azd;
                    }
                }
            }
            adj_a = prev;
            adj_a_dot = prev_dot;
        }
        let mut g: Vec<f64> = adj_a.into_iter().map(|v| 2.0 * v).collect();
        g.extend(grad_logits);
        Ok(g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Objective `‖∇θ L(x′, softmax(ŷ′)) − target‖²` at a dummy state.
pub fn dlg_objective(
    spec: &ModelSpec,
    params: &ParamVector,
    target: &ParamVector,
    state: &DlgState,
) -> Result<f64, AttackError> {
    problem(spec, params, target, state)?.objective(state)
}

/// Central-difference gradient of the objective over images then logits.
pub fn dlg_gradient_fd(
    spec: &ModelSpec,
    params: &ParamVector,
    target: &ParamVector,
    state: &DlgState,
    eps: f64,
) -> Result<Vec<f64>, AttackError> {
    problem(spec, params, target, state)?.fd_gradient(state, eps)
}

/// Exact gradient of the objective; dense-only models.
pub fn dlg_gradient_analytic(
    spec: &ModelSpec,
    params: &ParamVector,
    target: &ParamVector,
    state: &DlgState,
) -> Result<Vec<f64>, AttackError> {
    if !spec.is_dense_only() {
        return Err(AttackError::Config("analytic objective gradient needs a dense-only model".into()));
    }
    problem(spec, params, target, state)?.analytic_gradient(state)
}

fn problem<'a>(
    spec: &'a ModelSpec,
    params: &'a ParamVector,
    target: &'a ParamVector,
    state: &DlgState,
) -> Result<Problem<'a>, AttackError> {
    let width = spec.input_len();
    let classes = spec.n_classes()?;
    if width == 0 || state.images.len() % width != 0 {
        return Err(AttackError::Config("dummy images do not match the model input".into()));
    }
    let n = state.images.len() / width;
    if n == 0 || state.logits.len() != n * classes {
        return Err(AttackError::Config("dummy logits do not match the dummy images".into()));
    }
    params.check_layout(target)?;
    Ok(Problem {
        spec,
        params,
        target,
        n,
        width,
        classes,
    })
}

/// Uniform images in [0, 1] and standard-normal logits.
pub fn random_state(spec: &ModelSpec, n_images: usize, seed: u64) -> Result<DlgState, AttackError> {
    let mut rng = seed::rng(seed::mix_str(seed, "dlg-init"));
    let width = spec.input_len();
    let classes = spec.n_classes()?;
    let images = (0..n_images * width).map(|_| rng.random::<f64>()).collect();
    let logits = (0..n_images * classes).map(|_| rng.sample(StandardNormal)).collect();
    Ok(DlgState { images, logits })
}

/// Spot-checks the analytic gradient against finite differences on the
/// largest coordinates plus a random sample.
fn analytic_agrees(p: &Problem<'_>, s: &DlgState, analytic: &[f64], cfg: &DlgConfig) -> Result<bool, AttackError> {
    let mut order: Vec<usize> = (0..analytic.len()).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
    let half = cfg.check_coordinates.div_ceil(2).min(order.len());
    let mut coords: Vec<usize> = order[..half].to_vec();
    let mut rng = seed::rng(seed::mix_str(cfg.init_seed, "dlg-check"));
    for _ in half..cfg.check_coordinates {
        coords.push(rng.random_range(0..analytic.len()));
    }
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let checks: Vec<f64> = coords
        .par_iter()
        .map(|&c| p.fd_coordinate(s, c, cfg.fd_epsilon))
        .collect::<Result<_, _>>()?;
    Ok(coords.iter().zip(&checks).all(|(&c, &fd)| {
        let denom = fd.abs().max(analytic[c].abs()).max(1e-3 * scale);
        denom == 0.0 || (analytic[c] - fd).abs() <= cfg.check_tolerance * denom
    }))
}

/// Gradient-matching reconstruction of `n_images` inputs and labels.
/// Starts from `init` when given, else from a random state.
pub fn dlg_attack(
    grad: &ParamVector,
    spec: &ModelSpec,
    params: &ParamVector,
    n_images: usize,
    cfg: &DlgConfig,
    init: Option<DlgState>,
) -> Result<Reconstruction, AttackError> {
    if n_images == 0 {
        return Err(AttackError::Config("n_images must be at least 1".into()));
    }
    if cfg.iterations_per_image == 0 {
        return Err(AttackError::Config("iterations_per_image must be at least 1".into()));
    }
    if !(cfg.lr > 0.0) || !(cfg.fd_epsilon > 0.0) {
        return Err(AttackError::Config("lr and fd_epsilon must be positive".into()));
    }
    let mut state = match init {
        Some(s) => s,
        None => random_state(spec, n_images, cfg.init_seed)?,
    };
    let p = problem(spec, params, grad, &state)?;
    if p.n != n_images {
        return Err(AttackError::Config("initial state has the wrong number of images".into()));
    }

    let mut objective = p.objective(&state)?;
    let mut analytic = match cfg.gradient {
        GradientPath::FiniteDifference => false,
        GradientPath::Analytic => {
            if !spec.is_dense_only() {
                return Err(AttackError::Config("analytic objective gradient needs a dense-only model".into()));
            }
            true
        }
        GradientPath::Auto => spec.is_dense_only(),
    };
    let mut direction = if analytic {
        let g = p.analytic_gradient(&state)?;
        if analytic_agrees(&p, &state, &g, cfg)? {
            g
        } else {
            if cfg.gradient == GradientPath::Analytic {
                return Err(AttackError::Config("analytic objective gradient disagrees with finite differences".into()));
            }
            analytic = false;
            p.fd_gradient(&state, cfg.fd_epsilon)?
        }
    } else {
        p.fd_gradient(&state, cfg.fd_epsilon)?
    };

    let budget = cfg.iterations_per_image * n_images;
    let split = p.n * p.width;
    let mut pairs = Curvature::new(cfg.memory);
    let mut step = cfg.lr;
    let mut stalled = 0usize;
    let mut used = 0usize;
    let mut failed = false;
    let mut history = vec![objective];
    let mut search = pairs.direction(&direction);
    while used < budget && objective > cfg.tolerance {
        used += 1;
        let trial = DlgState {
            images: state
                .images
                .iter()
                .zip(&search[..split])
                .map(|(x, d)| (x - step * d).clamp(0.0, 1.0))
                .collect(),
            logits: state.logits.iter().zip(&search[split..]).map(|(y, d)| y - step * d).collect(),
        };
        let value = p.objective(&trial)?;
        if value < objective {
            let next = if analytic {
                p.analytic_gradient(&trial)?
            } else {
                p.fd_gradient(&trial, cfg.fd_epsilon)?
            };
            pairs.push(&state, &trial, &direction, &next);
            state = trial;
            objective = value;
            history.push(value);
            direction = next;
            stalled = 0;
            step = if pairs.is_empty() { step * 1.5 } else { 1.0 };
            search = pairs.direction(&direction);
        } else {
            step *= 0.5;
            stalled += 1;
            if stalled >= cfg.patience {
                failed = true;
                break;
            }
            if stalled == 8 && !pairs.is_empty() {
                // Curvature model is misleading here; restart from steepest descent.
                pairs.clear();
                step = cfg.lr;
                search = direction.clone();
            }
        }
    }

    let labels = state.logits.chunks(p.classes).map(nn::argmax).collect();
    let images = state.images.chunks(p.width).map(|c| c.to_vec()).collect();
    Ok(Reconstruction {
        images,
        labels: Some(labels),
        failed,
        iterations: used,
        final_objective: Some(objective),
        history,
        method: format!(
            "{}-backtracking/{}",
            if cfg.memory > 0 { "lbfgs" } else { "gd" },
            if analytic { "analytic" } else { "finite-difference" }
        ),
    })
}

/// Limited-memory inverse-Hessian estimate from accepted steps.
struct Curvature {
    capacity: usize,
    pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl Curvature {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            pairs: std::collections::VecDeque::with_capacity(capacity),
        }
    }

    fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn clear(&mut self) {
        self.pairs.clear();
    }

    fn push(&mut self, from: &DlgState, to: &DlgState, g_from: &[f64], g_to: &[f64]) {
        if self.capacity == 0 {
            return;
        }
        let s: Vec<f64> = to
            .images
            .iter()
            .chain(&to.logits)
            .zip(from.images.iter().chain(&from.logits))
            .map(|(a, b)| a - b)
            .collect();
        let y: Vec<f64> = g_to.iter().zip(g_from).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt()) {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion; falls back to the gradient when the result is
    /// not a descent direction.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let Some((s_last, y_last, _)) = self.pairs.back() else {
            return g.to_vec();
        };
        let mut q = g.to_vec();
        let mut alpha = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alpha.push(a);
        }
        let gamma = dot(s_last, y_last) / dot(y_last, y_last);
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in self.pairs.iter().zip(alpha.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        if dot(&q, g) > 0.0 && q.iter().all(|v| v.is_finite()) {
            q
        } else {
            g.to_vec()
        }
    }
}

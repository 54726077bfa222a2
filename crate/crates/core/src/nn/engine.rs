//! Forward pass, reverse-mode gradients and evaluation helpers.

use rand::Rng;

use super::params::ParamVector;
use super::spec::{Activation, Layer, ModelSpec};
use super::tensor::Tensor;
use crate::error::{NnError, NnResult};
use crate::seed;

/// Forward-pass mode. Dropout is only active in `Train`, with masks drawn
/// from a stream keyed by `seed` and the layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Supervision for a batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    /// Row-wise class distributions, shape `[batch, n_classes]`.
    Soft(&'a Tensor),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Soft(t) => t.rows(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub grad: ParamVector,
    /// Gradient with respect to the input batch, when requested.
    pub input_grad: Option<Tensor>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Per-layer record kept for the backward pass.
struct Trace {
    /// Input to each layer, `n × in_len`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations for dense/conv layers (empty otherwise).
    pre: Vec<Vec<f64>>,
    /// Dropout masks, already scaled by `1 / (1 - rate)`.
    masks: Vec<Option<Vec<f64>>>,
    output: Vec<f64>,
}

fn check_batch(spec: &ModelSpec, batch: &Tensor) -> NnResult<usize> {
    if batch.row_len() != spec.input_len() || batch.shape().len() < 2 {
        return Err(NnError::Config(format!(
            "batch shape {:?} does not match model input {:?}",
            batch.shape(),
            spec.input
        )));
    }
    Ok(batch.rows())
}

fn check_params(spec: &ModelSpec, params: &ParamVector) -> NnResult<()> {
    let layout = super::params::ParamLayout::for_spec(spec)?;
    if layout != **params.layout() {
        return Err(NnError::Config(
            "parameter layout does not match model spec".into(),
        ));
    }
    Ok(())
}

fn conv_forward(
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    w: &[f64],
    b: &[f64],
    kernel: usize,
    stride: usize,
    z: &mut [f64],
) {
    let (iw, ic) = (in_shape[1], in_shape[2]);
    let (oh, ow, oc) = (out_shape[0], out_shape[1], out_shape[2]);
    for oi in 0..oh {
        for oj in 0..ow {
            let zrow = &mut z[(oi * ow + oj) * oc..(oi * ow + oj + 1) * oc];
            zrow.copy_from_slice(b);
            for ki in 0..kernel {
                for kj in 0..kernel {
                    let px = ((oi * stride + ki) * iw + (oj * stride + kj)) * ic;
                    for c in 0..ic {
                        let xv = x[px + c];
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, zo) in zrow.iter_mut().enumerate() {
                            *zo += w[((o * ic + c) * kernel + ki) * kernel + kj] * xv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    w: &[f64],
    kernel: usize,
    stride: usize,
    dz: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let (iw, ic) = (in_shape[1], in_shape[2]);
    let (oh, ow, oc) = (out_shape[0], out_shape[1], out_shape[2]);
    let mut dx = dx;
    for oi in 0..oh {
        for oj in 0..ow {
            let drow = &dz[(oi * ow + oj) * oc..(oi * ow + oj + 1) * oc];
            for (o, d) in drow.iter().enumerate() {
                db[o] += d;
            }
            for ki in 0..kernel {
                for kj in 0..kernel {
                    let px = ((oi * stride + ki) * iw + (oj * stride + kj)) * ic;
                    for c in 0..ic {
                        let xv = x[px + c];
                        let mut acc = 0.0;
                        for (o, d) in drow.iter().enumerate() {
                            let wi = ((o * ic + c) * kernel + ki) * kernel + kj;
                            dw[wi] += d * xv;
                            acc += d * w[wi];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[px + c] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn run_forward(spec: &ModelSpec, params: &ParamVector, batch: &Tensor, mode: Mode, keep: bool) -> NnResult<Trace> {
    let n = check_batch(spec, batch)?;
    check_params(spec, params)?;
    let shapes = spec.shapes()?;
    let mut trace = Trace {
        inputs: Vec::new(),
        pre: Vec::new(),
        masks: Vec::new(),
        output: Vec::new(),
    };
    let mut cur: Vec<f64> = batch.data().to_vec();
    let mut in_shape: Vec<usize> = spec.input.to_vec();
    for (li, layer) in spec.layers.iter().enumerate() {
        let out_shape = &shapes[li];
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        let mut pre = Vec::new();
        let mut mask = None;
        let next = match *layer {
            Layer::Dense { activation, .. } => {
                let (w, b) = params.layer(li).expect("dense layer has params");
                let mut z = vec![0.0; n * out_len];
                for s in 0..n {
                    let x = &cur[s * in_len..(s + 1) * in_len];
                    let zs = &mut z[s * out_len..(s + 1) * out_len];
                    for (o, zo) in zs.iter_mut().enumerate() {
                        *zo = b[o] + dot(&w[o * in_len..(o + 1) * in_len], x);
                    }
                }
                let a = activate(&z, activation);
                pre = z;
                a
            }
            Layer::Conv {
                kernel,
                stride,
                activation,
                ..
            } => {
                let (w, b) = params.layer(li).expect("conv layer has params");
                let mut z = vec![0.0; n * out_len];
                for s in 0..n {
                    conv_forward(
                        &cur[s * in_len..(s + 1) * in_len],
                        &in_shape,
                        out_shape,
                        w,
                        b,
                        kernel,
                        stride,
                        &mut z[s * out_len..(s + 1) * out_len],
                    );
                }
                let a = activate(&z, activation);
                pre = z;
                a
            }
            Layer::AvgPool => {
                let (iw, c) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[0], out_shape[1]);
                let mut out = vec![0.0; n * out_len];
                for s in 0..n {
                    let x = &cur[s * in_len..(s + 1) * in_len];
                    let y = &mut out[s * out_len..(s + 1) * out_len];
                    for i in 0..oh {
                        for j in 0..ow {
                            for ch in 0..c {
                                let at = |di: usize, dj: usize| x[((2 * i + di) * iw + 2 * j + dj) * c + ch];
                                y[(i * ow + j) * c + ch] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                            }
                        }
                    }
                }
                out
            }
            Layer::Flatten => cur.clone(),
            Layer::Dropout { rate } => match mode {
                Mode::Train { seed: s } if rate > 0.0 => {
                    let mut rng = seed::rng(seed::mix(seed::mix_str(s, "dropout"), li as u64));
                    let keep_scale = 1.0 / (1.0 - rate);
                    let m: Vec<f64> = (0..cur.len())
                        .map(|_| if rng.random::<f64>() >= rate { keep_scale } else { 0.0 })
                        .collect();
                    let out = cur.iter().zip(&m).map(|(x, k)| x * k).collect();
                    mask = Some(m);
                    out
                }
                _ => cur.clone(),
            },
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { layer: li });
        }
        if keep {
            trace.inputs.push(std::mem::take(&mut cur));
            trace.pre.push(pre);
            trace.masks.push(mask);
        }
        cur = next;
        in_shape = out_shape.clone();
    }
    trace.output = cur;
    Ok(trace)
}

fn activate(z: &[f64], act: Activation) -> Vec<f64> {
    match act {
        Activation::Linear => z.to_vec(),
        _ => z.iter().map(|&v| act.apply(v)).collect(),
    }
}

/// Numerically stable in-place softmax over rows of length `k`.
pub fn softmax_rows(values: &mut [f64], k: usize) {
    for row in values.chunks_exact_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Raw class scores (output of the last layer, before softmax).
pub fn logits(spec: &ModelSpec, params: &ParamVector, batch: &Tensor, mode: Mode) -> NnResult<Tensor> {
    let trace = run_forward(spec, params, batch, mode, false)?;
    let k = spec.n_classes()?;
    Tensor::new(vec![batch.rows(), k], trace.output)
}

/// Class probabilities, shape `(batch, n_classes)`.
pub fn forward(spec: &ModelSpec, params: &ParamVector, batch: &Tensor, mode: Mode) -> NnResult<Tensor> {
    let mut out = logits(spec, params, batch, mode)?;
    let k = spec.n_classes()?;
    softmax_rows(out.data_mut(), k);
    if !out.is_finite() {
        return Err(NnError::NonFinite {
            layer: spec.layers.len(),
        });
    }
    Ok(out)
}

/// Mean cross-entropy loss and its gradient, dropout disabled.
pub fn gradients(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Tensor,
    targets: Targets<'_>,
) -> NnResult<(f64, ParamVector)> {
    let g = gradients_with_mode(spec, params, batch, targets, Mode::Eval, false)?;
    Ok((g.loss, g.grad))
}

/// Mean softmax cross-entropy and its gradient in the given mode.
pub fn gradients_with_mode(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Tensor,
    targets: Targets<'_>,
    mode: Mode,
    want_input_grad: bool,
) -> NnResult<Gradients> {
    let n = batch.rows();
    if n == 0 {
        return Err(NnError::Precondition("empty batch".into()));
    }
    if targets.len() != n {
        return Err(NnError::Config(format!(
            "{} targets for a batch of {n}",
            targets.len()
        )));
    }
    let k = spec.n_classes()?;
    let trace = run_forward(spec, params, batch, mode, true)?;
    let shapes = spec.shapes()?;

    // Loss and d loss / d logits.
    let mut probs = trace.output.clone();
    softmax_rows(&mut probs, k);
    let inv_n = 1.0 / n as f64;
    let mut delta = vec![0.0; n * k];
    let mut loss = 0.0;
    for s in 0..n {
        let logit_row = &trace.output[s * k..(s + 1) * k];
        let max = logit_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logit_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let p = &probs[s * k..(s + 1) * k];
        let d = &mut delta[s * k..(s + 1) * k];
        match targets {
            Targets::Classes(c) => {
                let y = c[s];
                if y >= k {
                    return Err(NnError::Config(format!("label {y} out of range for {k} classes")));
                }
                loss += lse - logit_row[y];
                for (j, dj) in d.iter_mut().enumerate() {
                    *dj = (p[j] - if j == y { 1.0 } else { 0.0 }) * inv_n;
                }
            }
            Targets::Soft(t) => {
                if t.row_len() != k {
                    return Err(NnError::Config(format!(
                        "soft targets have {} classes, model has {k}",
                        t.row_len()
                    )));
                }
                let tr = t.row(s);
                let mass: f64 = tr.iter().sum();
                for j in 0..k {
                    loss += tr[j] * (lse - logit_row[j]);
                    d[j] = (mass * p[j] - tr[j]) * inv_n;
                }
            }
        }
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(NnError::NonFinite {
            layer: spec.layers.len(),
        });
    }

    let mut grad = ParamVector::zeros(params.layout().clone());
    let mut upstream = delta;
    let mut input_grad = None;
    for li in (0..spec.layers.len()).rev() {
        let in_shape: Vec<usize> = if li == 0 {
            spec.input.to_vec()
        } else {
            shapes[li - 1].clone()
        };
        let out_shape = &shapes[li];
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        let x = &trace.inputs[li];
        let need_dx = li > 0 || want_input_grad;
        let mut dx = vec![0.0; if need_dx { n * in_len } else { 0 }];
        match spec.layers[li] {
            Layer::Dense { activation, .. } => {
                let z = &trace.pre[li];
                if activation != Activation::Linear {
                    for (u, &zv) in upstream.iter_mut().zip(z) {
                        *u *= activation.derivative(zv);
                    }
                }
                let (w, _) = params.layer(li).expect("dense params");
                let (wr, br) = {
                    let layout = grad.layout().clone();
                    (
                        layout.entry(li, "weight").unwrap().range(),
                        layout.entry(li, "bias").unwrap().range(),
                    )
                };
                let gv = grad.values_mut();
                for s in 0..n {
                    let xs = &x[s * in_len..(s + 1) * in_len];
                    let ds = &upstream[s * out_len..(s + 1) * out_len];
                    for (o, &d) in ds.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        gv[br.start + o] += d;
                        axpy(d, xs, &mut gv[wr.start + o * in_len..wr.start + (o + 1) * in_len]);
                        if need_dx {
                            axpy(d, &w[o * in_len..(o + 1) * in_len], &mut dx[s * in_len..(s + 1) * in_len]);
                        }
                    }
                }
            }
            Layer::Conv {
                kernel,
                stride,
                activation,
                ..
            } => {
                let z = &trace.pre[li];
                if activation != Activation::Linear {
                    for (u, &zv) in upstream.iter_mut().zip(z) {
                        *u *= activation.derivative(zv);
                    }
                }
                let (w, _) = params.layer(li).expect("conv params");
                let layout = grad.layout().clone();
                let wr = layout.entry(li, "weight").unwrap().range();
                let br = layout.entry(li, "bias").unwrap().range();
                let gv = grad.values_mut();
                let (gw, gb) = {
                    let (head, tail) = gv.split_at_mut(br.start);
                    (&mut head[wr.clone()], &mut tail[..br.len()])
                };
                for s in 0..n {
                    conv_backward(
                        &x[s * in_len..(s + 1) * in_len],
                        &in_shape,
                        out_shape,
                        w,
                        kernel,
                        stride,
                        &upstream[s * out_len..(s + 1) * out_len],
                        gw,
                        gb,
                        if need_dx {
                            Some(&mut dx[s * in_len..(s + 1) * in_len])
                        } else {
                            None
                        },
                    );
                }
            }
            Layer::AvgPool => {
                if need_dx {
                    let (iw, c) = (in_shape[1], in_shape[2]);
                    let (oh, ow) = (out_shape[0], out_shape[1]);
                    for s in 0..n {
                        let d = &upstream[s * out_len..(s + 1) * out_len];
                        let g = &mut dx[s * in_len..(s + 1) * in_len];
                        for i in 0..oh {
                            for j in 0..ow {
                                for ch in 0..c {
                                    let v = 0.25 * d[(i * ow + j) * c + ch];
                                    for di in 0..2 {
                                        for dj in 0..2 {
                                            g[((2 * i + di) * iw + 2 * j + dj) * c + ch] += v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Layer::Flatten => {
                if need_dx {
                    dx.copy_from_slice(&upstream);
                }
            }
            Layer::Dropout { .. } => {
                if need_dx {
                    match &trace.masks[li] {
                        Some(m) => {
                            for ((d, u), k) in dx.iter_mut().zip(&upstream).zip(m) {
                                *d = u * k;
                            }
                        }
                        None => dx.copy_from_slice(&upstream),
                    }
                }
            }
        }
        if li == 0 && want_input_grad {
            let mut shape = vec![n];
            shape.extend_from_slice(&spec.input);
            input_grad = Some(Tensor::new(shape, dx)?);
            break;
        }
        upstream = dx;
    }
    if !grad.is_finite() {
        return Err(NnError::NonFinite { layer: 0 });
    }
    Ok(Gradients {
        loss,
        grad,
        input_grad,
    })
}

/// Mean loss and number of correct argmax predictions, dropout disabled.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, images: &Tensor, labels: &[usize]) -> NnResult<(f64, usize)> {
    if images.rows() == 0 {
        return Ok((0.0, 0));
    }
    let k = spec.n_classes()?;
    let out = logits(spec, params, images, Mode::Eval)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (s, &y) in labels.iter().enumerate() {
        let row = out.row(s);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        if y >= k {
            return Err(NnError::Config(format!("label {y} out of range for {k} classes")));
        }
        loss += lse - row[y];
        if argmax(row) == y {
            correct += 1;
        }
    }
    Ok((loss / labels.len() as f64, correct))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(spec: &ModelSpec, params: &ParamVector, images: &Tensor) -> NnResult<Vec<usize>> {
    let out = logits(spec, params, images, Mode::Eval)?;
    Ok((0..out.rows()).map(|i| argmax(out.row(i))).collect())
}

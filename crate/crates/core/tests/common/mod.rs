//! Random models and a finite-difference gradient check shared by test targets.

use fedbench::nn::{self, Activation, Layer, ModelSpec, ParamVector, Targets, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_dense_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let side = rng.random_range(2..4usize);
    let input = [side, side, 1];
    let mut width = side * side;
    let mut layers = Vec::new();
    for _ in 0..rng.random_range(1..3usize) {
        let out = rng.random_range(2..6usize);
        let act = [Activation::Sigmoid, Activation::Relu, Activation::Linear][rng.random_range(0..3usize)];
        layers.push(Layer::Dense {
            inputs: width,
            outputs: out,
            activation: act,
        });
        width = out;
    }
    layers.push(Layer::Dense {
        inputs: width,
        outputs: rng.random_range(2..5usize),
        activation: Activation::Linear,
    });
    ModelSpec { input, layers }
}

pub fn random_conv_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let act = [Activation::Sigmoid, Activation::Relu, Activation::Linear][rng.random_range(0..3usize)];
    let channels = rng.random_range(1..3usize);
    let stride = rng.random_range(1..3usize);
    let input = [6, 6, rng.random_range(1..3usize)];
    let mut spec = ModelSpec {
        input,
        layers: vec![
            Layer::Conv {
                channels,
                kernel: 3,
                stride,
                activation: act,
            },
            Layer::AvgPool,
            Layer::Flatten,
        ],
    };
    let flat = spec.shapes().map(|s| s.last().unwrap().iter().product::<usize>()).unwrap_or(0);
    spec.layers.push(Layer::Dense {
        inputs: flat,
        outputs: 3,
        activation: Activation::Linear,
    });
    spec
}

pub fn random_batch(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let len = spec.input_len();
    let data: Vec<f64> = (0..n * len).map(|_| rng.random::<f64>()).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input);
    let k = spec.n_classes().unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    (Tensor::new(shape, data).unwrap(), labels)
}

pub fn loss_at(spec: &ModelSpec, p: &ParamVector, batch: &Tensor, labels: &[usize]) -> f64 {
    nn::gradients(spec, p, batch, Targets::Classes(labels)).unwrap().0
}

/// Max relative error between analytic gradient and central differences.
pub fn fd_max_rel_error(spec: &ModelSpec, p: &ParamVector, batch: &Tensor, labels: &[usize]) -> f64 {
    let (_, grad) = nn::gradients(spec, p, batch, Targets::Classes(labels)).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let mut plus = p.clone();
        plus.values_mut()[i] += eps;
        let mut minus = p.clone();
        minus.values_mut()[i] -= eps;
        let fd = (loss_at(spec, &plus, batch, labels) - loss_at(spec, &minus, batch, labels)) / (2.0 * eps);
        let a = grad.values()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Worst relative error over `cases` random dense and conv models, every
/// fourth one convolutional.
pub fn gradient_check(cases: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let spec = if case % 4 == 3 {
            random_conv_spec(&mut rng)
        } else {
            random_dense_spec(&mut rng)
        };
        let mut p = ParamVector::init(&spec, case).unwrap();
        // Non-zero biases so every parameter receives a generic gradient.
        for v in p.values_mut() {
            *v += 0.1 * (rng.random::<f64>() - 0.5);
        }
        let (batch, labels) = random_batch(&spec, 3, &mut rng);
        worst = worst.max(fd_max_rel_error(&spec, &p, &batch, &labels));
    }
    worst
}

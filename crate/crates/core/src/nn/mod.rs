//! Minimal neural-network engine: dense/conv layers, softmax cross-entropy,
//! reverse-mode gradients and first-order optimizers.

pub mod engine;
pub mod optim;
pub mod params;
pub mod spec;
pub mod tensor;

pub use engine::{argmax, evaluate, forward, gradients, gradients_with_mode, logits, predict, Gradients, Mode, Targets};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{flatten_params, unflatten_params, NamedTensor, ParamLayout, ParamVector};
pub use spec::{Activation, Layer, ModelSpec};
pub use tensor::Tensor;

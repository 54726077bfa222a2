//! Model descriptions: layer stack, shape inference, canonical text form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, NnResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// First derivative expressed through the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }

    #[inline]
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Relu | Activation::Linear => 0.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }
}

impl FromStr for Activation {
    type Err = NnError;
    fn from_str(s: &str) -> NnResult<Self> {
        match s.trim() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            other => Err(NnError::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One entry of the layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    /// Valid-padding square convolution over an `H × W × C` input.
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    },
    /// 2×2 average pooling with stride 2.
    AvgPool,
    Flatten,
    Dropout { rate: f64 },
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv { .. })
    }
}

/// Per-sample activation shape: either spatial `[h, w, c]` or flat `[n]`.
pub type Shape = Vec<usize>;

/// Model description. The loss is always softmax cross-entropy over the
/// output of the last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input image shape `[height, width, channels]`.
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// Dense network on flattened `side × side × 1` images.
    pub fn mlp(input: [usize; 3], hidden: &[usize], n_classes: usize, dropout: f64) -> Self {
        let mut layers = Vec::new();
        let mut width = input.iter().product();
        for &h in hidden {
            layers.push(Layer::Dense {
                inputs: width,
                outputs: h,
                activation: Activation::Relu,
            });
            if dropout > 0.0 {
                layers.push(Layer::Dropout { rate: dropout });
            }
            width = h;
        }
        layers.push(Layer::Dense {
            inputs: width,
            outputs: n_classes,
            activation: Activation::Linear,
        });
        Self { input, layers }
    }

    /// Small LeNet-like network: two conv + pool stages and a dense head.
    pub fn lenet(input: [usize; 3], n_classes: usize) -> NnResult<Self> {
        let mut spec = Self {
            input,
            layers: vec![
                Layer::Conv {
                    channels: 6,
                    kernel: 5,
                    stride: 1,
                    activation: Activation::Relu,
                },
                Layer::AvgPool,
                Layer::Conv {
                    channels: 16,
                    kernel: 5,
                    stride: 1,
                    activation: Activation::Relu,
                },
                Layer::AvgPool,
                Layer::Flatten,
            ],
        };
        let flat = spec.output_shape_partial()?.iter().product();
        spec.layers.push(Layer::Dense {
            inputs: flat,
            outputs: 64,
            activation: Activation::Relu,
        });
        spec.layers.push(Layer::Dense {
            inputs: 64,
            outputs: n_classes,
            activation: Activation::Linear,
        });
        Ok(spec)
    }

    fn output_shape_partial(&self) -> NnResult<Shape> {
        let shapes = self.shapes()?;
        Ok(shapes.last().cloned().unwrap_or_else(|| self.input.to_vec()))
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Output shape of every layer, validating composition on the way.
    pub fn shapes(&self) -> NnResult<Vec<Shape>> {
        let mut shape: Shape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                Layer::Dense {
                    inputs, outputs, ..
                } => {
                    let have: usize = shape.iter().product();
                    if have != inputs {
                        return Err(NnError::Config(format!(
                            "layer {i}: dense expects {inputs} inputs, previous layer yields {have}"
                        )));
                    }
                    if outputs == 0 {
                        return Err(NnError::Config(format!("layer {i}: dense with 0 outputs")));
                    }
                    vec![outputs]
                }
                Layer::Conv {
                    channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if shape.len() != 3 {
                        return Err(NnError::Config(format!(
                            "layer {i}: conv needs a spatial input, got {shape:?}"
                        )));
                    }
                    if kernel == 0 || stride == 0 || channels == 0 {
                        return Err(NnError::Config(format!("layer {i}: degenerate conv")));
                    }
                    if shape[0] < kernel || shape[1] < kernel {
                        return Err(NnError::Config(format!(
                            "layer {i}: kernel {kernel} larger than input {shape:?}"
                        )));
                    }
                    vec![
                        (shape[0] - kernel) / stride + 1,
                        (shape[1] - kernel) / stride + 1,
                        channels,
                    ]
                }
                Layer::AvgPool => {
                    if shape.len() != 3 || shape[0] < 2 || shape[1] < 2 {
                        return Err(NnError::Config(format!(
                            "layer {i}: pooling needs a spatial input of at least 2x2, got {shape:?}"
                        )));
                    }
                    vec![shape[0] / 2, shape[1] / 2, shape[2]]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(NnError::Config(format!(
                            "layer {i}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    shape
                }
            };
            out.push(shape.clone());
        }
        match out.last() {
            Some(s) if s.len() == 1 && s[0] >= 1 => Ok(out),
            Some(s) => Err(NnError::Config(format!(
                "model must end in a flat class-score layer, ends with {s:?}"
            ))),
            None => Err(NnError::Config("model has no layers".into())),
        }
    }

    pub fn validate(&self) -> NnResult<()> {
        self.shapes().map(|_| ())
    }

    pub fn n_classes(&self) -> NnResult<usize> {
        Ok(self.shapes()?.last().map(|s| s[0]).unwrap_or(0))
    }

    /// Copy suitable for gradient-matching attacks: ReLU becomes sigmoid in
    /// dense-only models and linear in models with convolutions.
    pub fn for_gradient_attack(&self) -> Self {
        let has_conv = self.layers.iter().any(|l| matches!(l, Layer::Conv { .. }));
        let replacement = if has_conv {
            Activation::Linear
        } else {
            Activation::Sigmoid
        };
        let swap = |a: Activation| if a == Activation::Relu { replacement } else { a };
        let layers = self
            .layers
            .iter()
            .map(|l| match *l {
                Layer::Dense {
                    inputs,
                    outputs,
                    activation,
                } => Layer::Dense {
                    inputs,
                    outputs,
                    activation: swap(activation),
                },
                Layer::Conv {
                    channels,
                    kernel,
                    stride,
                    activation,
                } => Layer::Conv {
                    channels,
                    kernel,
                    stride,
                    activation: swap(activation),
                },
                other => other,
            })
            .collect();
        Self {
            input: self.input,
            layers,
        }
    }

    pub fn is_dense_only(&self) -> bool {
        self.layers
            .iter()
            .all(|l| matches!(l, Layer::Dense { .. } | Layer::Flatten | Layer::Dropout { .. }))
    }

    /// Multiply-add count of one forward pass, counted as 2 flops per MAC.
    pub fn forward_flops(&self) -> NnResult<f64> {
        let shapes = self.shapes()?;
        let mut prev: Shape = self.input.to_vec();
        let mut flops = 0.0;
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            flops += match *layer {
                Layer::Dense {
                    inputs, outputs, ..
                } => 2.0 * (inputs * outputs) as f64,
                Layer::Conv {
                    channels, kernel, ..
                } => 2.0 * (shape[0] * shape[1] * channels * prev[2] * kernel * kernel) as f64,
                Layer::AvgPool => (prev.iter().product::<usize>()) as f64,
                Layer::Flatten | Layer::Dropout { .. } => 0.0,
            };
            prev = shape.clone();
        }
        Ok(flops)
    }

    /// Forward plus backward pass for one sample.
    pub fn train_flops(&self) -> NnResult<f64> {
        Ok(3.0 * self.forward_flops()?)
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Dense {
                inputs,
                outputs,
                activation,
            } => write!(f, "dense({inputs},{outputs},{})", activation.name()),
            Layer::Conv {
                channels,
                kernel,
                stride,
                activation,
            } => write!(f, "conv({channels},{kernel},{stride},{})", activation.name()),
            Layer::AvgPool => write!(f, "avgpool"),
            Layer::Flatten => write!(f, "flatten"),
            Layer::Dropout { rate } => write!(f, "dropout({rate})"),
        }
    }
}

/// Canonical text form, e.g.
/// `input(28,28,1) dense(784,64,relu) dropout(0.2) dense(64,10,linear)`.
impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [h, w, c] = self.input;
        write!(f, "input({h},{w},{c})")?;
        for l in &self.layers {
            write!(f, " {l}")?;
        }
        Ok(())
    }
}

fn parse_call(tok: &str) -> NnResult<(&str, Vec<&str>)> {
    match tok.find('(') {
        None => Ok((tok, Vec::new())),
        Some(open) => {
            let close = tok
                .strip_suffix(')')
                .ok_or_else(|| NnError::Config(format!("unterminated `{tok}`")))?;
            let args = close[open + 1..].split(',').map(str::trim).collect();
            Ok((&tok[..open], args))
        }
    }
}

fn parse_usize(s: &str, tok: &str) -> NnResult<usize> {
    s.parse()
        .map_err(|_| NnError::Config(format!("bad integer `{s}` in `{tok}`")))
}

impl FromStr for ModelSpec {
    type Err = NnError;

    fn from_str(s: &str) -> NnResult<Self> {
        let mut tokens = s.split_whitespace();
        let first = tokens
            .next()
            .ok_or_else(|| NnError::Config("empty model spec".into()))?;
        let (name, args) = parse_call(first)?;
        if name != "input" || args.len() != 3 {
            return Err(NnError::Config(format!(
                "model spec must start with input(h,w,c), got `{first}`"
            )));
        }
        let input = [
            parse_usize(args[0], first)?,
            parse_usize(args[1], first)?,
            parse_usize(args[2], first)?,
        ];
        let mut layers = Vec::new();
        for tok in tokens {
            let (name, args) = parse_call(tok)?;
            let layer = match (name, args.len()) {
                ("dense", 3) => Layer::Dense {
                    inputs: parse_usize(args[0], tok)?,
                    outputs: parse_usize(args[1], tok)?,
                    activation: args[2].parse()?,
                },
                ("conv", 4) => Layer::Conv {
                    channels: parse_usize(args[0], tok)?,
                    kernel: parse_usize(args[1], tok)?,
                    stride: parse_usize(args[2], tok)?,
                    activation: args[3].parse()?,
                },
                ("avgpool", 0) => Layer::AvgPool,
                ("flatten", 0) => Layer::Flatten,
                ("dropout", 1) => Layer::Dropout {
                    rate: args[0]
                        .parse()
                        .map_err(|_| NnError::Config(format!("bad rate in `{tok}`")))?,
                },
                _ => return Err(NnError::Config(format!("unknown layer `{tok}`"))),
            };
            layers.push(layer);
        }
        let spec = ModelSpec { input, layers };
        spec.validate()?;
        Ok(spec)
    }
}

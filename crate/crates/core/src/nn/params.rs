//! Flat parameter vectors and their layout.

use std::sync::Arc;

use rand::Rng;
use rand_distr::Uniform;

use super::spec::{Layer, ModelSpec};
use super::tensor::Tensor;
use crate::error::{NnError, NnResult};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub layer: usize,
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered `(layer, name, shape)` index over a flat vector.
///
/// Dense weights are stored `[outputs, inputs]` so that row `i` belongs to
/// unit `i`; conv weights are `[channels, in_channels, kernel, kernel]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn for_spec(spec: &ModelSpec) -> NnResult<Self> {
        let shapes = spec.shapes()?;
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut prev = spec.input.to_vec();
        for (i, layer) in spec.layers.iter().enumerate() {
            let shapes_here: Vec<(&'static str, Vec<usize>)> = match *layer {
                Layer::Dense {
                    inputs, outputs, ..
                } => vec![("weight", vec![outputs, inputs]), ("bias", vec![outputs])],
                Layer::Conv {
                    channels, kernel, ..
                } => vec![
                    ("weight", vec![channels, prev[2], kernel, kernel]),
                    ("bias", vec![channels]),
                ],
                _ => Vec::new(),
            };
            for (name, shape) in shapes_here {
                let len: usize = shape.iter().product();
                entries.push(ParamEntry {
                    layer: i,
                    name,
                    shape,
                    offset,
                });
                offset += len;
            }
            prev = shapes[i].clone();
        }
        Ok(Self {
            entries,
            total: offset,
        })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entry(&self, layer: usize, name: &str) -> Option<&ParamEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.name == name)
    }
}

/// Flat ordered view of every model parameter; the unit of exchange,
/// aggregation and byte accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        Self {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> NnResult<Self> {
        if values.len() != layout.total() {
            return Err(NnError::Config(format!(
                "layout holds {} parameters, got {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    /// Glorot-uniform weights and zero biases, one seeded stream per layer.
    pub fn init(spec: &ModelSpec, seed: u64) -> NnResult<Self> {
        let layout = Arc::new(ParamLayout::for_spec(spec)?);
        let mut values = vec![0.0; layout.total()];
        for e in layout.entries().iter().filter(|e| e.name == "weight") {
            let (fan_in, fan_out) = match e.shape.as_slice() {
                [o, i] => (*i, *o),
                [o, i, k1, k2] => (i * k1 * k2, o * k1 * k2),
                _ => unreachable!("weight shapes are 2-d or 4-d"),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            let mut rng = seed::rng(seed::mix(seed::mix_str(seed, "layer-init"), e.layer as u64));
            for v in &mut values[e.range()] {
                *v = rng.sample(dist);
            }
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_layout(&self, other: &ParamVector) -> NnResult<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(NnError::Config("parameter layouts differ".into()))
        }
    }

    pub fn slice(&self, entry: &ParamEntry) -> &[f64] {
        &self.values[entry.range()]
    }

    /// Parameters of `layer` as `(weight, bias)` slices.
    pub fn layer(&self, layer: usize) -> Option<(&[f64], &[f64])> {
        let w = self.layout.entry(layer, "weight")?;
        let b = self.layout.entry(layer, "bias")?;
        Some((&self.values[w.range()], &self.values[b.range()]))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn with_values(&self, values: Vec<f64>) -> NnResult<Self> {
        Self::from_values(Arc::clone(&self.layout), values)
    }

    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) -> NnResult<()> {
        self.check_layout(x)?;
        for (a, b) in self.values.iter_mut().zip(&x.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn sub(&self, other: &ParamVector) -> NnResult<ParamVector> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        self.with_values(values)
    }

    pub fn squared_distance(&self, other: &ParamVector) -> NnResult<f64> {
        self.check_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// One named parameter tensor of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub layer: usize,
    pub name: &'static str,
    pub tensor: Tensor,
}

/// Packs per-layer tensors into a flat vector in layout order.
pub fn flatten_params(spec: &ModelSpec, tensors: &[NamedTensor]) -> NnResult<ParamVector> {
    let layout = Arc::new(ParamLayout::for_spec(spec)?);
    if tensors.len() != layout.entries().len() {
        return Err(NnError::Config(format!(
            "expected {} parameter tensors, got {}",
            layout.entries().len(),
            tensors.len()
        )));
    }
    let mut values = Vec::with_capacity(layout.total());
    for (entry, t) in layout.entries().iter().zip(tensors) {
        if t.layer != entry.layer || t.name != entry.name || t.tensor.shape() != entry.shape {
            return Err(NnError::Config(format!(
                "tensor ({}, {}, {:?}) does not match layout entry ({}, {}, {:?})",
                t.layer,
                t.name,
                t.tensor.shape(),
                entry.layer,
                entry.name,
                entry.shape
            )));
        }
        values.extend_from_slice(t.tensor.data());
    }
    ParamVector::from_values(layout, values)
}

pub fn unflatten_params(spec: &ModelSpec, params: &ParamVector) -> NnResult<Vec<NamedTensor>> {
    let layout = ParamLayout::for_spec(spec)?;
    if layout != **params.layout() {
        return Err(NnError::Config("parameter vector does not match model".into()));
    }
    layout
        .entries()
        .iter()
        .map(|e| {
            Ok(NamedTensor {
                layer: e.layer,
                name: e.name,
                tensor: Tensor::new(e.shape.clone(), params.slice(e).to_vec())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::Activation;

    #[test]
    fn mlp_512_parameter_count() {
        let spec = ModelSpec::mlp([28, 28, 1], &[512, 512], 10, 0.2);
        let p = ParamVector::init(&spec, 1).unwrap();
        assert_eq!(p.len(), 784 * 512 + 512 + 512 * 512 + 512 + 512 * 10 + 10);
        assert_eq!(p.len(), 669_706);
    }

    #[test]
    fn activation_does_not_change_layout() {
        let a = ModelSpec::mlp([4, 4, 1], &[8], 3, 0.0);
        let mut b = a.clone();
        if let Layer::Dense { activation, .. } = &mut b.layers[0] {
            *activation = Activation::Sigmoid;
        }
        assert_eq!(
            ParamLayout::for_spec(&a).unwrap(),
            ParamLayout::for_spec(&b).unwrap()
        );
    }

    #[test]
    fn unflatten_then_flatten_is_identity() {
        let spec = ModelSpec {
            input: [12, 12, 1],
            layers: vec![
                Layer::Conv {
                    channels: 3,
                    kernel: 3,
                    stride: 1,
                    activation: Activation::Relu,
                },
                Layer::AvgPool,
                Layer::Flatten,
                Layer::Dense {
                    inputs: 75,
                    outputs: 4,
                    activation: Activation::Linear,
                },
            ],
        };
        let p = ParamVector::init(&spec, 9).unwrap();
        let tensors = unflatten_params(&spec, &p).unwrap();
        assert_eq!(tensors[0].tensor.shape(), &[3, 1, 3, 3]);
        let back = flatten_params(&spec, &tensors).unwrap();
        assert_eq!(back.values(), p.values());
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let spec = ModelSpec::mlp([10, 10, 1], &[20], 5, 0.0);
        let p = ParamVector::init(&spec, 3).unwrap();
        let w = p.layout().entry(0, "weight").unwrap().clone();
        let b = p.layout().entry(0, "bias").unwrap().clone();
        let limit = (6.0f64 / 120.0).sqrt();
        assert!(p.slice(&w).iter().all(|v| v.abs() <= limit));
        assert!(p.slice(&b).iter().all(|&v| v == 0.0));
        assert_eq!(p, ParamVector::init(&spec, 3).unwrap());
        assert_ne!(p, ParamVector::init(&spec, 4).unwrap());
    }
}

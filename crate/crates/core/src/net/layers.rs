use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparsityRatio;
use crate::tensor::Tensor;

/// Sparse-activation hook attached to a conv or linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HookConfig {
    pub ratio: SparsityRatio,
    /// Whether this layer consults dropout masks during training.
    pub dropout: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Linear output (classifier head).
    Identity,
    Relu,
    /// Pre-mask, k-WTA, ReLU.
    Sparse(HookConfig),
}

/// Architecture description used to build a [`NetworkState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        activation: Activation,
    },
    MaxPool {
        size: usize,
    },
    Flatten,
    Linear {
        units: usize,
        activation: Activation,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d { weight: Tensor, bias: Tensor, stride: usize, padding: usize, activation: Activation },
    MaxPool2d { size: usize },
    Flatten,
    Linear { weight: Tensor, bias: Tensor, activation: Activation },
}

impl Layer {
    pub fn activation(&self) -> Option<Activation> {
        match self {
            Layer::Conv2d { activation, .. } | Layer::Linear { activation, .. } => Some(*activation),
            _ => None,
        }
    }

    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv",
            Layer::MaxPool2d { .. } => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Linear { .. } => "linear",
        }
    }
}

/// A hooked layer, in network order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HookInfo {
    pub layer: usize,
    pub filters: usize,
    pub config: HookConfig,
}

/// Ordered layer stack with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    class_count: usize,
}

impl NetworkState {
    /// Builds a network with He-uniform weights and zero biases. The last
    /// layer must be a linear layer with `class_count` units.
    pub fn build<R: Rng + ?Sized>(
        input_shape: &[usize],
        specs: &[LayerSpec],
        class_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            let bad = |msg: String| Error::InvalidInput(format!("layer {i}: {msg}"));
            let layer = match *spec {
                LayerSpec::Conv { filters, kernel, stride, padding, activation } => {
                    let [c, _, _] = shape[..] else {
                        return Err(bad(format!("conv needs a C x H x W input, got {shape:?}")));
                    };
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("conv sizes must be positive".into()));
                    }
                    let fan_in = c * kernel * kernel;
                    Layer::Conv2d {
                        weight: he_uniform(&[filters, c, kernel, kernel], fan_in, rng),
                        bias: Tensor::zeros(&[filters]),
                        stride,
                        padding,
                        activation,
                    }
                }
                LayerSpec::MaxPool { size } => {
                    if size == 0 {
                        return Err(bad("pool size must be positive".into()));
                    }
                    Layer::MaxPool2d { size }
                }
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Linear { units, activation } => {
                    let [d] = shape[..] else {
                        return Err(bad(format!("linear needs a flat input, got {shape:?}")));
                    };
                    if units == 0 {
                        return Err(bad("linear needs at least one unit".into()));
                    }
                    Layer::Linear { weight: he_uniform(&[units, d], d, rng), bias: Tensor::zeros(&[units]), activation }
                }
            };
            shape = output_shape(&layer, &shape).map_err(|e| bad(e.to_string()))?;
            layers.push(layer);
        }
        Self::from_layers(input_shape.to_vec(), layers, class_count)
    }

    /// Assembles a network from explicit layers, validating the shape chain.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::InvalidInput("class_count must be positive".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape.clone());
        for (i, layer) in layers.iter().enumerate() {
            let out = output_shape(layer, shapes.last().unwrap())
                .map_err(|e| Error::InvalidInput(format!("layer {i}: {e}")))?;
            if let Some(Activation::Sparse(h)) = layer.activation() {
                SparsityRatio::new(h.ratio.get())?;
            }
            shapes.push(out);
        }
        if shapes.last().unwrap() != &[class_count] {
            return Err(Error::InvalidInput(format!(
                "network output shape {:?} does not match {class_count} classes",
                shapes.last().unwrap()
            )));
        }
        Ok(NetworkState { input_shape, layers, shapes, class_count })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Shape of the input to layer `i` (`i == layers.len()` gives the output).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn hooks(&self) -> Vec<HookInfo> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l.activation() {
                Some(Activation::Sparse(config)) => Some(HookInfo { layer: i, filters: self.shapes[i + 1][0], config }),
                _ => None,
            })
            .collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().filter_map(|l| l.params()).flat_map(|(w, b)| [w, b])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().filter_map(|l| l.params_mut()).flat_map(|(w, b)| [w, b])
    }

    /// `(name, tensor)` pairs, e.g. `layer0.weight`.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some((w, b)) = l.params() {
                out.push((format!("layer{i}.weight"), w));
                out.push((format!("layer{i}.bias"), b));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// Whether `other` has the same layer kinds, parameter shapes and hooks.
    pub fn check_same_architecture(&self, other: &NetworkState) -> Result<()> {
        if self.input_shape != other.input_shape || self.class_count != other.class_count {
            return Err(Error::ArchitectureMismatch("input or output shapes differ".into()));
        }
        if self.layers.len() != other.layers.len() {
            return Err(Error::ArchitectureMismatch(format!("{} vs {} layers", self.layers.len(), other.layers.len())));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            let same_params = match (a.params(), b.params()) {
                (Some((wa, ba)), Some((wb, bb))) => wa.shape() == wb.shape() && ba.shape() == bb.shape(),
                (None, None) => true,
                _ => false,
            };
            if a.kind() != b.kind() || !same_params || a.activation() != b.activation() {
                return Err(Error::ArchitectureMismatch(format!("layer {i} differs")));
            }
        }
        Ok(())
    }
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

fn output_shape(layer: &Layer, input: &[usize]) -> Result<Vec<usize>> {
    let err = |m: String| Error::InvalidInput(m);
    match layer {
        Layer::Conv2d { weight, bias, stride, padding, .. } => {
            let [c, h, w] = input[..] else {
                return Err(err(format!("conv needs C x H x W input, got {input:?}")));
            };
            let ws = weight.shape();
            if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] || bias.shape() != [ws[0]] {
                return Err(err(format!("conv weight {ws:?} does not fit input {input:?}")));
            }
            let k = ws[2];
            match (conv_out(h, k, *stride, *padding), conv_out(w, k, *stride, *padding)) {
                (Some(ho), Some(wo)) => Ok(vec![ws[0], ho, wo]),
                _ => Err(err(format!("kernel {k} larger than padded input {input:?}"))),
            }
        }
        Layer::MaxPool2d { size } => {
            let [c, h, w] = input[..] else {
                return Err(err(format!("max-pool needs C x H x W input, got {input:?}")));
            };
            if h < *size || w < *size {
                return Err(err(format!("pool {size} larger than input {input:?}")));
            }
            Ok(vec![c, h / size, w / size])
        }
        Layer::Flatten => Ok(vec![input.iter().product()]),
        Layer::Linear { weight, bias, .. } => {
            let [d] = input[..] else {
                return Err(err(format!("linear needs flat input, got {input:?}")));
            };
            let ws = weight.shape();
            if ws.len() != 2 || ws[1] != d || bias.shape() != [ws[0]] {
                return Err(err(format!("linear weight {ws:?} does not fit input {input:?}")));
            }
            Ok(vec![ws[0]])
        }
    }
}

/// Desk-scale convolutional architecture: two 3x3 conv layers (each followed
/// by 2x2 max-pooling), a hidden linear layer, and a linear head over
/// `classes` outputs.
///
/// With `sparsity = Some((first, last))` both conv layers are k-WTA hooked,
/// and only the last one consults dropout masks when `dropout` is set.
pub fn small_conv(
    filters: (usize, usize),
    hidden: usize,
    classes: usize,
    sparsity: Option<(SparsityRatio, SparsityRatio)>,
    dropout: bool,
) -> Vec<LayerSpec> {
    let (first, last) = match sparsity {
        Some((a, b)) => (
            Activation::Sparse(HookConfig { ratio: a, dropout: false }),
            Activation::Sparse(HookConfig { ratio: b, dropout }),
        ),
        None => (Activation::Relu, Activation::Relu),
    };
    vec![
        LayerSpec::Conv { filters: filters.0, kernel: 3, stride: 1, padding: 0, activation: first },
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Conv { filters: filters.1, kernel: 3, stride: 1, padding: 0, activation: last },
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Linear { units: hidden, activation: Activation::Relu },
        LayerSpec::Linear { units: classes, activation: Activation::Identity },
    ]
}

//! Fully-connected networks with ReLU hidden layers.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tape::{Gradients, NodeId, Tape};
use super::tensor::{add_row_inplace, gemm, relu_inplace, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine layer `x W + b` followed by an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`
    pub weight: Tensor,
    /// `1 x out`
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let (_, out) = weight.as_matrix("Dense weight")?;
        if bias.len() != out {
            return Err(Error::Shape {
                context: "Dense bias".into(),
                expected: vec![1, out],
                got: bias.shape().to_vec(),
            });
        }
        let bias = Tensor::matrix(1, out, bias.into_data());
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Tape leaves holding one network's parameters.
#[derive(Debug, Clone)]
pub struct MlpBinding {
    weights: Vec<NodeId>,
    biases: Vec<NodeId>,
}

impl MlpBinding {
    /// Parameter gradients in [`Mlp::parameters`] order.
    pub fn gradients(&self, mlp: &Mlp, grads: &Gradients) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for ((w, b), layer) in self.weights.iter().zip(&self.biases).zip(&mlp.layers) {
            out.push(grads.get_or_zeros(*w, layer.weight.shape()));
            out.push(grads.get_or_zeros(*b, layer.bias.shape()));
        }
        out
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, ReLU on every layer but the last.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "MLP widths must have at least two positive entries, got {widths:?}"
            )));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                let activation = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Dense {
                    weight: Tensor::matrix(fan_in, fan_out, w),
                    bias: Tensor::zeros(&[1, fan_out]),
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("MLP needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::LayerShape {
                    layer: i + 1,
                    expected: pair[0].out_dim(),
                    got: pair[1].in_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    /// Parameters as `[w0, b0, w1, b1, ...]`.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let got = input.cols();
        if input.shape().len() != 2 || got != self.input_dim() {
            return Err(Error::LayerShape {
                layer: 0,
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    /// Forward pass without recording, one sample per row.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = gemm(&x, false, &layer.weight, false)?;
            add_row_inplace(&mut z, &layer.bias);
            if layer.activation == Activation::Relu {
                relu_inplace(&mut z);
            }
            x = z;
        }
        Ok(x)
    }

    /// Place the parameters on `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpBinding {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            weights.push(tape.leaf(l.weight.clone(), trainable));
            biases.push(tape.leaf(l.bias.clone(), trainable));
        }
        MlpBinding { weights, biases }
    }

    /// Recorded forward pass; bitwise equal to [`Mlp::forward`].
    pub fn record(&self, tape: &mut Tape, binding: &MlpBinding, input: NodeId) -> Result<NodeId> {
        self.check_input(tape.value(input))?;
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let relu = layer.activation == Activation::Relu;
            x = tape.dense(x, binding.weights[i], binding.biases[i], relu)?;
        }
        Ok(x)
    }
}

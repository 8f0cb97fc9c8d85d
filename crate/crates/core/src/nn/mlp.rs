use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Fully connected network shape. Hidden layers use `activation`; the output
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("all MLP dimensions must be >= 1"));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn segments(&self, prefix: &str) -> Vec<(String, usize)> {
        self.layer_dims()
            .iter()
            .enumerate()
            .flat_map(|(i, &(fan_in, fan_out))| {
                [
                    (format!("{prefix}.l{i}.weight"), fan_in * fan_out),
                    (format!("{prefix}.l{i}.bias"), fan_out),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Glorot-uniform weights, zero biases, written into `params`.
    pub fn init_into(&self, prefix: &str, params: &mut ParamVector, rng: &mut Rng) -> Result<()> {
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in params.slice_mut(&format!("{prefix}.l{i}.weight"))? {
                *w = rng::uniform_symmetric(rng, bound);
            }
            params
                .slice_mut(&format!("{prefix}.l{i}.bias"))?
                .fill(0.0);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    weight: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

/// An [`MlpSpec`] resolved against a parameter layout.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn bind(spec: &MlpSpec, prefix: &str, params: &ParamVector) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let w = params.segment(&format!("{prefix}.l{i}.weight"))?;
            let b = params.segment(&format!("{prefix}.l{i}.bias"))?;
            if w.len != fan_in * fan_out || b.len != fan_out {
                return Err(Error::LayoutMismatch(format!(
                    "layer {prefix}.l{i} expects {fan_in}x{fan_out}"
                )));
            }
            layers.push(Layer {
                weight: w.offset,
                bias: b.offset,
                fan_in,
                fan_out,
            });
        }
        Ok(Self {
            layers,
            activation: spec.activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    fn affine(layer: &Layer, p: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &p[layer.weight..layer.weight + layer.fan_in * layer.fan_out];
        let b = &p[layer.bias..layer.bias + layer.fan_out];
        (0..layer.fan_out)
            .map(|o| {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                row.iter().zip(x).fold(b[o], |acc, (wi, xi)| acc + wi * xi)
            })
            .collect()
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, p, &h);
            if i < last {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = z;
        }
        h
    }

    pub fn forward_traced(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, Trace) {
        let last = self.layers.len() - 1;
        let mut trace = Trace::default();
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::affine(layer, p, &h);
            trace.inputs.push(h);
            if i < last {
                h = z.iter().map(|&v| self.activation.apply(v)).collect();
                trace.pre.push(z);
            } else {
                h = z;
            }
        }
        (h, trace)
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the network input.
    pub fn backward(&self, p: &[f64], trace: &Trace, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut delta = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            let w = &p[layer.weight..layer.weight + layer.fan_in * layer.fan_out];
            let mut grad_in = vec![0.0; layer.fan_in];
            for o in 0..layer.fan_out {
                let d = delta[o];
                grad[layer.bias + o] += d;
                let g_row = &mut grad[layer.weight + o * layer.fan_in..layer.weight + (o + 1) * layer.fan_in];
                let w_row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for j in 0..layer.fan_in {
                    g_row[j] += d * input[j];
                    grad_in[j] += d * w_row[j];
                }
            }
            if i > 0 {
                let pre = &trace.pre[i - 1];
                for (g, &z) in grad_in.iter_mut().zip(pre) {
                    *g *= self.activation.derivative(z);
                }
            }
            delta = grad_in;
        }
        delta
    }
}

//! Minimal convolutional network kernel with exact analytical gradients.
//!
//! Activations flow as `(N, C, H, W)` through convolutional stages and as
//! `(N, F)` after a [`LayerSpec::Flatten`]. Parametric layers (conv and
//! dense) own one weight tensor and one bias tensor each and are indexed
//! `k = 0, 1, ...` in layer order; batch-norm layers are indexed separately.

mod bnstats;
mod kernels;
mod loss;
mod pass;

pub use bnstats::{recompute_bn_stats, BN_RECOMPUTE_CHUNK};
pub use loss::{one_vs_rest, square_hinge_loss};
pub use pass::{backward, forward, forward_until, predict, Cache, Grads, Mode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projections::glorot_init;
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

fn one() -> usize {
    1
}

fn default_eps() -> f64 {
    DEFAULT_BN_EPS
}

fn default_momentum() -> f64 {
    DEFAULT_BN_MOMENTUM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    BatchNorm {
        channels: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Flatten,
}

impl LayerSpec {
    pub fn conv(
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerSpec::Conv2d {
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels,
            out_channels,
            stride,
            padding,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Weight tensor shape: `(out, in, kh, kw)` for conv, `(out, in)` for dense.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                ..
            } => Some(vec![out_channels, in_channels, kernel_h, kernel_w]),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some(vec![out_features, in_features]),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` counting the receptive field for convolutions.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                ..
            } => {
                let rf = kernel_h * kernel_w;
                Some((rf * in_channels, rf * out_channels))
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((in_features, out_features)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
                padding,
            } => {
                let [c, h, w] = match input {
                    [c, h, w] => [*c, *h, *w],
                    _ => {
                        return Err(Error::config(format!(
                            "conv expects (C,H,W) input, got {input:?}"
                        )))
                    }
                };
                if c != in_channels {
                    return Err(Error::config(format!(
                        "conv expects {in_channels} input channels, got {c}"
                    )));
                }
                if stride == 0 || kernel_h == 0 || kernel_w == 0 || out_channels == 0 {
                    return Err(Error::config(
                        "conv stride, kernel and channels must be positive",
                    ));
                }
                if h + 2 * padding < kernel_h || w + 2 * padding < kernel_w {
                    return Err(Error::config(format!(
                        "conv kernel {kernel_h}x{kernel_w} larger than padded input {h}x{w}"
                    )));
                }
                let ho = (h + 2 * padding - kernel_h) / stride + 1;
                let wo = (w + 2 * padding - kernel_w) / stride + 1;
                Ok(vec![out_channels, ho, wo])
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => match input {
                [f] if *f == in_features && out_features > 0 => Ok(vec![out_features]),
                _ => Err(Error::config(format!(
                    "dense {in_features}->{out_features} cannot take input {input:?}"
                ))),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::BatchNorm { channels, eps, .. } => {
                if input.first() != Some(&channels) {
                    return Err(Error::config(format!(
                        "batch norm over {channels} channels cannot take input {input:?}"
                    )));
                }
                if !(eps > 0.0) {
                    return Err(Error::config("batch norm eps must be positive"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Where a layer's parameters live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Param(usize),
    Bn(usize),
    Stateless,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    /// Per-sample input shape, `[C, H, W]` or `[F]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    /// Standard deviation the weights of each parametric layer were drawn with.
    pub init_std: Vec<f64>,
    pub bn: Vec<BnState>,
}

impl Network {
    /// Builds a network with Glorot-initialized weights, zero biases and
    /// identity batch norms.
    pub fn init(input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let shapes = chain_shapes(input_shape, &layers)?;
        if shapes.last().map(|s| s.len()) != Some(1) {
            return Err(Error::config(
                "network must end in a flat (N, classes) output",
            ));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut init_std = Vec::new();
        let mut bn = Vec::new();
        for layer in &layers {
            if layer.is_parametric() {
                let k = weights.len() as u64;
                let mut rng = rng::stream(seed, Domain::Init, k, 0);
                let (w, std) = glorot_init(layer, &mut rng)?;
                biases.push(Tensor::zeros(&[w.shape()[0]]));
                weights.push(w);
                init_std.push(std);
            } else if let LayerSpec::BatchNorm { channels, .. } = layer {
                bn.push(BnState::new(*channels));
            }
        }
        let net = Self {
            input_shape: input_shape.to_vec(),
            layers,
            weights,
            biases,
            init_std,
            bn,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks shape chaining and that stored parameters match the layer list.
    pub fn validate(&self) -> Result<()> {
        chain_shapes(&self.input_shape, &self.layers)?;
        let slots = self.slots();
        let n_param = slots.iter().filter(|s| matches!(s, Slot::Param(_))).count();
        let n_bn = slots.iter().filter(|s| matches!(s, Slot::Bn(_))).count();
        if self.weights.len() != n_param
            || self.biases.len() != n_param
            || self.init_std.len() != n_param
        {
            return Err(Error::config(
                "parameter count does not match parametric layers",
            ));
        }
        if self.bn.len() != n_bn {
            return Err(Error::config(
                "batch-norm state count does not match layers",
            ));
        }
        for (layer, slot) in self.layers.iter().zip(&slots) {
            match (layer, *slot) {
                (_, Slot::Param(k)) => {
                    let shape = layer.weight_shape().expect("parametric");
                    if self.weights[k].shape() != shape.as_slice() {
                        return Err(Error::config(format!(
                            "layer {k} weight shape {:?}, expected {shape:?}",
                            self.weights[k].shape()
                        )));
                    }
                    if self.biases[k].shape() != [shape[0]] {
                        return Err(Error::config(format!("layer {k} bias shape mismatch")));
                    }
                    if !(self.init_std[k] > 0.0) {
                        return Err(Error::config(format!(
                            "layer {k} init_std must be positive"
                        )));
                    }
                }
                (LayerSpec::BatchNorm { channels, .. }, Slot::Bn(j)) => {
                    let s = &self.bn[j];
                    let c = *channels;
                    if s.gamma.len() != c
                        || s.beta.len() != c
                        || s.running_mean.len() != c
                        || s.running_var.len() != c
                    {
                        return Err(Error::config(format!(
                            "batch norm {j} state length mismatch"
                        )));
                    }
                    if s.running_var.iter().any(|&v| !(v >= 0.0)) {
                        return Err(Error::config(format!(
                            "batch norm {j} has negative running variance"
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn slots(&self) -> Vec<Slot> {
        slots_for(&self.layers)
    }

    pub fn num_param_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_classes(&self) -> usize {
        chain_shapes(&self.input_shape, &self.layers)
            .ok()
            .and_then(|s| s.last().map(|v| v[0]))
            .unwrap_or(0)
    }

    /// Layer index of the `k`-th parametric layer.
    pub fn param_layer_index(&self, k: usize) -> usize {
        self.slots()
            .iter()
            .position(|s| *s == Slot::Param(k))
            .expect("parametric layer index in range")
    }

    /// Total number of weights across parametric layers.
    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }
}

pub(crate) fn slots_for(layers: &[LayerSpec]) -> Vec<Slot> {
    let mut k = 0;
    let mut j = 0;
    layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                k += 1;
                Slot::Param(k - 1)
            }
            LayerSpec::BatchNorm { .. } => {
                j += 1;
                Slot::Bn(j - 1)
            }
            _ => Slot::Stateless,
        })
        .collect()
}

/// Per-sample shapes `[input, after layer 0, after layer 1, ...]`.
pub fn chain_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input.is_empty() || input.contains(&0) {
        return Err(Error::config(format!("invalid input shape {input:?}")));
    }
    let mut shapes = vec![input.to_vec()];
    for (i, layer) in layers.iter().enumerate() {
        let next = layer
            .output_shape(shapes.last().expect("non-empty"))
            .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
        shapes.push(next);
    }
    Ok(shapes)
}

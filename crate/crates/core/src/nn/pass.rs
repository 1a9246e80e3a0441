//! Forward and backward passes over a [`Network`].

use super::kernels::{self, BnGeom, ConvGeom};
use super::{LayerSpec, Network, Slot};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm normalizes with batch statistics.
    Train,
    /// Batch norm normalizes with running statistics.
    Infer,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: usize,
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    mode: Mode,
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    activations: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
    weights: Vec<Tensor>,
}

impl Cache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    /// Output of layer `i`.
    pub fn output_of(&self, i: usize) -> &Tensor {
        &self.activations[i + 1]
    }
}

/// Parameter gradients shaped like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub bn_gamma: Vec<Vec<f64>>,
    pub bn_beta: Vec<Vec<f64>>,
    /// Gradient with respect to the network input.
    pub input: Tensor,
}

fn check_weights(net: &Network, weights: &[Tensor]) -> Result<()> {
    if weights.len() != net.weights.len() {
        return Err(Error::config(format!(
            "expected {} weight tensors, got {}",
            net.weights.len(),
            weights.len()
        )));
    }
    for (k, (p, w)) in weights.iter().zip(&net.weights).enumerate() {
        if p.shape() != w.shape() {
            return Err(Error::config(format!(
                "effective weight {k} has shape {:?}, expected {:?}",
                p.shape(),
                w.shape()
            )));
        }
    }
    Ok(())
}

fn check_batch(net: &Network, batch: &Tensor) -> Result<usize> {
    let shape = batch.shape();
    if shape.len() < 2 || shape[1..] != net.input_shape[..] || shape[0] == 0 {
        return Err(Error::config(format!(
            "batch shape {:?} does not match input (N, {:?})",
            shape, net.input_shape
        )));
    }
    Ok(shape[0])
}

fn bn_geom(x: &Tensor) -> BnGeom {
    let s = x.shape();
    BnGeom {
        n: s[0],
        c: s[1],
        spatial: s[2..].iter().product(),
    }
}

fn conv_geom(layer: &LayerSpec, x: &Tensor) -> ConvGeom {
    let LayerSpec::Conv2d {
        kernel_h,
        kernel_w,
        out_channels,
        stride,
        padding,
        ..
    } = *layer
    else {
        unreachable!("conv geometry for non-conv layer")
    };
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    ConvGeom {
        n: s[0],
        cin: s[1],
        h,
        w,
        cout: out_channels,
        kh: kernel_h,
        kw: kernel_w,
        stride,
        pad: padding,
        ho: (h + 2 * padding - kernel_h) / stride + 1,
        wo: (w + 2 * padding - kernel_w) / stride + 1,
    }
}

struct Run {
    output: Tensor,
    activations: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
}

fn run(
    net: &Network,
    weights: &[Tensor],
    batch: &Tensor,
    mode: Mode,
    stop: usize,
    keep: bool,
) -> Result<Run> {
    check_batch(net, batch)?;
    run_from(net, weights, batch.clone(), 0, stop, mode, keep)
}

/// Runs layers `start..stop` on `x`, the output of layer `start - 1`.
fn run_from(
    net: &Network,
    weights: &[Tensor],
    mut x: Tensor,
    start: usize,
    stop: usize,
    mode: Mode,
    keep: bool,
) -> Result<Run> {
    check_weights(net, weights)?;
    let n = x.shape().first().copied().unwrap_or(0);
    let slots = net.slots();
    let mut activations = Vec::new();
    let mut bn_caches = Vec::new();
    for (i, (layer, slot)) in net
        .layers
        .iter()
        .zip(&slots)
        .enumerate()
        .take(stop)
        .skip(start)
    {
        let mut bn_cache = None;
        let y = match (layer, *slot) {
            (LayerSpec::Conv2d { .. }, Slot::Param(k)) => {
                let g = conv_geom(layer, &x);
                let data =
                    kernels::conv_forward(&g, x.data(), weights[k].data(), net.biases[k].data());
                Tensor::new(vec![n, g.cout, g.ho, g.wo], data)?
            }
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                Slot::Param(k),
            ) => {
                let data = kernels::dense_forward(
                    n,
                    *in_features,
                    *out_features,
                    x.data(),
                    weights[k].data(),
                    net.biases[k].data(),
                );
                Tensor::new(vec![n, *out_features], data)?
            }
            (LayerSpec::Relu, _) => x.map(|v| v.max(0.0)),
            (LayerSpec::Flatten, _) => {
                let f = x.len() / n;
                x.clone().reshape(&[n, f])?
            }
            (LayerSpec::BatchNorm { eps, .. }, Slot::Bn(j)) => {
                let g = bn_geom(&x);
                let st = &net.bn[j];
                let (mean, var) = match mode {
                    Mode::Train => kernels::channel_moments(&g, x.data()),
                    Mode::Infer => (st.running_mean.clone(), st.running_var.clone()),
                };
                let (y, xhat, inv_std) =
                    kernels::bn_apply(&g, x.data(), &mean, &var, &st.gamma, &st.beta, *eps);
                if keep {
                    bn_cache = Some(BnCache {
                        xhat,
                        inv_std,
                        batch_mean: mean,
                        batch_var: var,
                        count: g.count(),
                    });
                }
                Tensor::new(x.shape().to_vec(), y)?
            }
            _ => unreachable!("slot assignment matches layer kind"),
        };
        if !y.all_finite() {
            return Err(Error::Numeric {
                layer: i,
                detail: "non-finite activation in forward pass".into(),
            });
        }
        if keep {
            activations.push(std::mem::replace(&mut x, y));
            bn_caches.push(bn_cache);
        } else {
            x = y;
        }
    }
    Ok(Run {
        output: x,
        activations,
        bn: bn_caches,
    })
}

/// Full forward pass with `weights` standing in for the stored weights.
///
/// In [`Mode::Train`] batch norm uses batch statistics; the running
/// statistics are left untouched here and can be folded in afterwards with
/// [`Network::apply_batch_stats`].
pub fn forward(
    net: &Network,
    weights: &[Tensor],
    batch: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Cache)> {
    let r = run(net, weights, batch, mode, net.layers.len(), true)?;
    let mut activations = r.activations;
    activations.push(r.output.clone());
    Ok((
        r.output,
        Cache {
            mode,
            activations,
            bn: r.bn,
            weights: weights.to_vec(),
        },
    ))
}

/// Output of the first `stop` layers, without keeping intermediates.
pub fn forward_until(
    net: &Network,
    weights: &[Tensor],
    batch: &Tensor,
    stop: usize,
    mode: Mode,
) -> Result<Tensor> {
    Ok(run(net, weights, batch, mode, stop.min(net.layers.len()), false)?.output)
}

/// Output of layers `start..stop` applied to `x`, which must be the output
/// of layer `start - 1` (or the input batch when `start == 0`).
pub(crate) fn forward_range(
    net: &Network,
    weights: &[Tensor],
    x: Tensor,
    start: usize,
    stop: usize,
    mode: Mode,
) -> Result<Tensor> {
    Ok(run_from(
        net,
        weights,
        x,
        start,
        stop.min(net.layers.len()),
        mode,
        false,
    )?
    .output)
}

/// Arg-max class per sample in inference mode.
pub fn predict(net: &Network, weights: &[Tensor], batch: &Tensor) -> Result<Vec<usize>> {
    let logits = run(net, weights, batch, Mode::Infer, net.layers.len(), false)?.output;
    let classes = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect())
}

pub fn backward(net: &Network, cache: &Cache, loss_grad: &Tensor) -> Result<Grads> {
    if cache.activations.len() != net.layers.len() + 1 || cache.bn.len() != net.layers.len() {
        return Err(Error::Usage(
            "cache was produced by a different network".into(),
        ));
    }
    if cache.weights.len() != net.weights.len()
        || cache
            .weights
            .iter()
            .zip(&net.weights)
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::Usage(
            "cache weights do not match network parameters".into(),
        ));
    }
    let out = cache.activations.last().expect("non-empty");
    if loss_grad.shape() != out.shape() {
        return Err(Error::Usage(format!(
            "loss gradient shape {:?} does not match output {:?}",
            loss_grad.shape(),
            out.shape()
        )));
    }

    let slots = net.slots();
    let mut gw: Vec<Tensor> = net
        .weights
        .iter()
        .map(|w| Tensor::zeros(w.shape()))
        .collect();
    let mut gb: Vec<Tensor> = net
        .biases
        .iter()
        .map(|b| Tensor::zeros(b.shape()))
        .collect();
    let mut ggamma: Vec<Vec<f64>> = net.bn.iter().map(|s| vec![0.0; s.gamma.len()]).collect();
    let mut gbeta = ggamma.clone();

    let mut dy = loss_grad.clone();
    for i in (0..net.layers.len()).rev() {
        let x = &cache.activations[i];
        let layer = &net.layers[i];
        let dx = match (layer, slots[i]) {
            (LayerSpec::Conv2d { .. }, Slot::Param(k)) => {
                let g = conv_geom(layer, x);
                let (dx, dw, db) =
                    kernels::conv_backward(&g, x.data(), cache.weights[k].data(), dy.data());
                gw[k] = Tensor::new(net.weights[k].shape().to_vec(), dw)?;
                gb[k] = Tensor::new(vec![g.cout], db)?;
                dx
            }
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                Slot::Param(k),
            ) => {
                let n = x.shape()[0];
                let (dx, dw, db) = kernels::dense_backward(
                    n,
                    *in_features,
                    *out_features,
                    x.data(),
                    cache.weights[k].data(),
                    dy.data(),
                );
                gw[k] = Tensor::new(net.weights[k].shape().to_vec(), dw)?;
                gb[k] = Tensor::new(vec![*out_features], db)?;
                dx
            }
            (LayerSpec::Relu, _) => x
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&xv, &d)| if xv > 0.0 { d } else { 0.0 })
                .collect(),
            (LayerSpec::Flatten, _) => dy.data().to_vec(),
            (LayerSpec::BatchNorm { .. }, Slot::Bn(j)) => {
                let bc = cache.bn[i]
                    .as_ref()
                    .ok_or_else(|| Error::Usage("cache is missing batch-norm state".into()))?;
                let g = bn_geom(x);
                let (dx, dg, db) = kernels::bn_backward(
                    &g,
                    &bc.xhat,
                    &bc.inv_std,
                    &net.bn[j].gamma,
                    dy.data(),
                    cache.mode == Mode::Train,
                );
                ggamma[j] = dg;
                gbeta[j] = db;
                dx
            }
            _ => unreachable!("slot assignment matches layer kind"),
        };
        dy = Tensor::new(x.shape().to_vec(), dx)?;
        if !dy.all_finite() {
            return Err(Error::Numeric {
                layer: i,
                detail: "non-finite gradient in backward pass".into(),
            });
        }
    }
    Ok(Grads {
        weights: gw,
        biases: gb,
        bn_gamma: ggamma,
        bn_beta: gbeta,
        input: dy,
    })
}

impl Network {
    /// Folds the batch statistics of a train-mode pass into the running
    /// statistics with each layer's momentum. Variance is bias-corrected.
    pub fn apply_batch_stats(&mut self, cache: &Cache) -> Result<()> {
        if cache.mode != Mode::Train || cache.bn.len() != self.layers.len() {
            return Err(Error::Usage(
                "running stats need a train-mode cache from this network".into(),
            ));
        }
        for (i, slot) in self.slots().into_iter().enumerate() {
            let (Slot::Bn(j), LayerSpec::BatchNorm { momentum, .. }) = (slot, &self.layers[i])
            else {
                continue;
            };
            let bc = cache.bn[i]
                .as_ref()
                .expect("train cache keeps batch-norm state");
            let m = *momentum;
            let corr = if bc.count > 1 {
                bc.count as f64 / (bc.count - 1) as f64
            } else {
                1.0
            };
            let st = &mut self.bn[j];
            for c in 0..st.running_mean.len() {
                st.running_mean[c] = (1.0 - m) * st.running_mean[c] + m * bc.batch_mean[c];
                st.running_var[c] = (1.0 - m) * st.running_var[c] + m * bc.batch_var[c] * corr;
            }
        }
        Ok(())
    }
}

#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use robustproj::io::{synthetic_dataset, Dataset, Split, SyntheticKind, SyntheticSpec};
use robustproj::rng::{self, Domain, Rng};
use robustproj::{LayerSpec, Network, Tensor};

pub fn rng(tag: u64) -> Rng {
    rng::stream(tag, Domain::Test, 0, 0)
}

pub fn normal_tensor(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(r))
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Two convolutions and a dense head on 4×8×8 inputs. With `bn`, batch norm
/// follows each ReLU so every bias still reaches the loss.
pub fn small_layers(bn: bool, classes: usize) -> Vec<LayerSpec> {
    let mut l = vec![LayerSpec::conv(3, 4, 6, 1, 1), LayerSpec::Relu];
    if bn {
        l.push(LayerSpec::batch_norm(6));
    }
    l.push(LayerSpec::conv(3, 6, 5, 2, 1));
    l.push(LayerSpec::Relu);
    if bn {
        l.push(LayerSpec::batch_norm(5));
    }
    l.push(LayerSpec::Flatten);
    l.push(LayerSpec::dense(5 * 4 * 4, classes));
    l
}

/// Network with nonzero biases and batch-norm affine parameters, so every
/// parameter participates in gradients.
pub fn randomized_net(layers: Vec<LayerSpec>, input: &[usize], seed: u64) -> Network {
    let mut net = Network::init(input, layers, seed).unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    for b in &mut net.biases {
        for v in b.data_mut() {
            *v = r.random_range(-0.3..0.3);
        }
    }
    for st in &mut net.bn {
        for g in &mut st.gamma {
            *g = r.random_range(0.5..1.5);
        }
        for b in &mut st.beta {
            *b = r.random_range(-0.3..0.3);
        }
    }
    net
}

/// Small toy network matching the 1×8×8 synthetic task.
pub fn toy_net(seed: u64) -> Network {
    Network::init(&[1, 8, 8], robustproj::io::toy_layers(4), seed).unwrap()
}

pub fn stripes(n_train: usize, n_test: usize, noise: f64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec::new(SyntheticKind::Stripes, 4, noise, 0);
    (
        synthetic_dataset(&spec, n_train, Split::Train).unwrap(),
        synthetic_dataset(&spec, n_test, Split::Test).unwrap(),
    )
}

pub fn blobs(n_train: usize, n_test: usize, noise: f64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec::new(SyntheticKind::Blobs, 4, noise, 0);
    (
        synthetic_dataset(&spec, n_train, Split::Train).unwrap(),
        synthetic_dataset(&spec, n_test, Split::Test).unwrap(),
    )
}

/// Direct-summation convolution written independently of the library:
/// `y[n][co][oy][ox] = b[co] + Σ w[co][ci][ky][kx] · x[n][ci][oy·s+ky−p][ox·s+kx−p]`.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xv = |a: usize, c: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
            0.0
        } else {
            x.data()[((a * cin + c) * h + i as usize) * wd + j as usize]
        }
    };
    Tensor::from_fn(&[n, cout, ho, wo], |idx| {
        let ox = idx % wo;
        let oy = (idx / wo) % ho;
        let co = (idx / (wo * ho)) % cout;
        let a = idx / (wo * ho * cout);
        let mut s = b[co];
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let i = (oy * stride + ky) as isize - pad as isize;
                    let j = (ox * stride + kx) as isize - pad as isize;
                    s += w.data()[((co * cin + ci) * kh + ky) * kw + kx] * xv(a, ci, i, j);
                }
            }
        }
        s
    })
}

/// Loss of a full forward pass under `mode` with one-vs-rest targets.
pub fn loss_of(net: &Network, batch: &Tensor, labels: &[usize], mode: robustproj::Mode) -> f64 {
    use robustproj::nn;
    let (logits, _) = nn::forward(net, &net.weights, batch, mode).unwrap();
    let t = nn::one_vs_rest(labels, logits.shape()[1]).unwrap();
    nn::square_hinge_loss(&logits, &t).unwrap().0
}

/// One parameter group compared against central differences.
#[derive(Debug)]
pub struct GradCheck {
    pub name: String,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).
    pub rel_error: f64,
    pub count: usize,
}

/// Checks every weight, bias, batch-norm and input gradient of `net` with
/// central differences of step `h`.
pub fn finite_difference_check(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    mode: robustproj::Mode,
    h: f64,
) -> Vec<GradCheck> {
    use robustproj::nn;
    let (logits, cache) = nn::forward(net, &net.weights, batch, mode).unwrap();
    let t = nn::one_vs_rest(labels, logits.shape()[1]).unwrap();
    let (_, dl) = nn::square_hinge_loss(&logits, &t).unwrap();
    let g = nn::backward(net, &cache, &dl).unwrap();

    let mut out = Vec::new();
    let mut compare =
        |name: String, analytic: &[f64], perturb: &mut dyn FnMut(usize, f64) -> f64| {
            let numeric: Vec<f64> = (0..analytic.len())
                .map(|i| (perturb(i, h) - perturb(i, -h)) / (2.0 * h))
                .collect();
            let diff: f64 = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).powi(2))
                .sum::<f64>()
                .sqrt();
            let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nn_: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            let denom = na.max(nn_);
            out.push(GradCheck {
                name,
                rel_error: if denom == 0.0 { 0.0 } else { diff / denom },
                count: analytic.len(),
            });
        };

    for k in 0..net.weights.len() {
        compare(format!("weights[{k}]"), g.weights[k].data(), &mut |i, d| {
            let mut m = net.clone();
            m.weights[k].data_mut()[i] += d;
            loss_of(&m, batch, labels, mode)
        });
        compare(format!("biases[{k}]"), g.biases[k].data(), &mut |i, d| {
            let mut m = net.clone();
            m.biases[k].data_mut()[i] += d;
            loss_of(&m, batch, labels, mode)
        });
    }
    for j in 0..net.bn.len() {
        compare(format!("bn_gamma[{j}]"), &g.bn_gamma[j], &mut |i, d| {
            let mut m = net.clone();
            m.bn[j].gamma[i] += d;
            loss_of(&m, batch, labels, mode)
        });
        compare(format!("bn_beta[{j}]"), &g.bn_beta[j], &mut |i, d| {
            let mut m = net.clone();
            m.bn[j].beta[i] += d;
            loss_of(&m, batch, labels, mode)
        });
    }
    compare("input".into(), g.input.data(), &mut |i, d| {
        let mut b = batch.clone();
        b.data_mut()[i] += d;
        loss_of(net, &b, labels, mode)
    });
    out
}

/// Trains the toy network on the stripes task from `toy_net(seed)`.
pub fn trained_toy(
    spec: robustproj::ProjectionSpec,
    clipped: bool,
    epochs: usize,
    seed: u64,
    train: &Dataset,
) -> Network {
    use robustproj::trainer::{ClipPolicy, TrainConfig, Trainer};
    let cfg = TrainConfig {
        projection: spec,
        clip: if clipped {
            ClipPolicy::default()
        } else {
            ClipPolicy::disabled()
        },
        learning_rate: 0.003,
        batch_size: 50,
        epochs,
        seed,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(toy_net(seed), cfg).unwrap();
    for _ in 0..epochs {
        t.run_epoch(train).unwrap();
    }
    t.net
}

mod common;

use common::*;
use robustproj::nn::{self, Mode};
use robustproj::{Error, LayerSpec, Network, Tensor};

#[test]
fn gradients_match_central_differences_with_batch_norm() {
    for seed in 0..3 {
        let net = randomized_net(small_layers(true, 4), &[4, 8, 8], seed);
        let mut r = rng(100 + seed);
        let batch = normal_tensor(&[3, 4, 8, 8], &mut r);
        for mode in [Mode::Train, Mode::Infer] {
            for c in finite_difference_check(&net, &batch, &[0, 2, 3], mode, 1e-5) {
                assert!(
                    c.rel_error < 1e-5,
                    "seed {seed} {mode:?} {}: {:e}",
                    c.name,
                    c.rel_error
                );
            }
        }
    }
}

#[test]
fn bias_feeding_batch_norm_has_structurally_zero_gradient() {
    let layers = vec![
        LayerSpec::conv(3, 4, 6, 1, 1),
        LayerSpec::batch_norm(6),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::dense(6 * 64, 3),
        LayerSpec::batch_norm(3),
    ];
    let net = randomized_net(layers, &[4, 8, 8], 2);
    let batch = normal_tensor(&[3, 4, 8, 8], &mut rng(2));
    let labels = [0, 1, 2];
    let (logits, cache) = nn::forward(&net, &net.weights, &batch, Mode::Train).unwrap();
    let t = nn::one_vs_rest(&labels, 3).unwrap();
    let g = nn::backward(&net, &cache, &nn::square_hinge_loss(&logits, &t).unwrap().1).unwrap();
    for k in 0..2 {
        assert!(
            g.biases[k].data().iter().all(|v| v.abs() < 1e-12),
            "{:?}",
            g.biases[k]
        );
    }
    // h = 1e-5 straddles a ReLU kink on this fixture
    let h = 1e-6;
    for c in finite_difference_check(&net, &batch, &labels, Mode::Train, h) {
        if c.name.starts_with("biases") {
            continue;
        }
        assert!(c.rel_error < 1e-5, "{}: {:e}", c.name, c.rel_error);
    }
    for k in 0..2 {
        for i in 0..net.biases[k].len() {
            let f = |d: f64| {
                let mut m = net.clone();
                m.biases[k].data_mut()[i] += d;
                loss_of(&m, &batch, &labels, Mode::Train)
            };
            assert!(((f(h) - f(-h)) / (2.0 * h)).abs() < 1e-8);
        }
    }
}

#[test]
fn gradients_match_central_differences_without_batch_norm() {
    let net = randomized_net(small_layers(false, 3), &[4, 8, 8], 7);
    let batch = normal_tensor(&[2, 4, 8, 8], &mut rng(7));
    for c in finite_difference_check(&net, &batch, &[1, 2], Mode::Train, 1e-5) {
        assert!(c.rel_error < 1e-5, "{}: {:e}", c.name, c.rel_error);
    }
}

#[test]
fn conv_matches_direct_summation_oracle() {
    let mut r = rng(11);
    for (k, cin, cout, stride, pad, h) in [
        (3, 2, 3, 1, 1, 3),
        (3, 3, 4, 2, 1, 7),
        (2, 1, 2, 1, 0, 5),
        (1, 2, 2, 1, 0, 4),
        (5, 2, 3, 3, 2, 9),
    ] {
        let layer = LayerSpec::conv(k, cin, cout, stride, pad);
        let mut net = Network::init(&[cin, h, h], vec![layer, LayerSpec::Flatten], 5).unwrap();
        for v in net.biases[0].data_mut() {
            *v = rand::Rng::random_range(&mut r, -1.0..1.0);
        }
        let x = normal_tensor(&[2, cin, h, h], &mut r);
        let y = nn::forward_until(&net, &net.weights, &x, 1, Mode::Infer).unwrap();
        let want = conv_oracle(&x, &net.weights[0], net.biases[0].data(), stride, pad);
        assert_eq!(y.shape(), want.shape());
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn two_layer_logits_match_hand_rolled_oracle() {
    let layers = vec![
        LayerSpec::conv(2, 1, 2, 1, 0),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::dense(8, 3),
    ];
    let mut net = Network::init(&[1, 3, 3], layers, 21).unwrap();
    let mut r = rng(21);
    for b in &mut net.biases {
        *b = uniform_tensor(b.shape(), -0.5, 0.5, &mut r);
    }
    let x = normal_tensor(&[2, 1, 3, 3], &mut r);
    let (y, _) = nn::forward(&net, &net.weights, &x, Mode::Infer).unwrap();
    let hidden = conv_oracle(&x, &net.weights[0], net.biases[0].data(), 1, 0).map(|v| v.max(0.0));
    for s in 0..2 {
        for o in 0..3 {
            let mut acc = net.biases[1].data()[o];
            for i in 0..8 {
                acc += net.weights[1].data()[o * 8 + i] * hidden.data()[s * 8 + i];
            }
            assert!((y.data()[s * 3 + o] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_kernel_maps_input_to_itself() {
    let layers = vec![LayerSpec::conv(1, 1, 1, 1, 0), LayerSpec::Flatten];
    let mut net = Network::init(&[1, 4, 4], layers, 0).unwrap();
    net.weights[0].data_mut()[0] = 1.0;
    let x = normal_tensor(&[2, 1, 4, 4], &mut rng(1));
    let y = nn::forward_until(&net, &net.weights, &x, 1, Mode::Infer).unwrap();
    assert_eq!(y, x);
}

#[test]
fn relu_forward_and_backward() {
    let net = Network::init(&[3], vec![LayerSpec::Relu], 0).unwrap();
    let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
    let (y, cache) = nn::forward(&net, &net.weights, &x, Mode::Infer).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    let g = nn::backward(
        &net,
        &cache,
        &Tensor::new(vec![1, 3], vec![5.0, 5.0, 5.0]).unwrap(),
    )
    .unwrap();
    assert_eq!(g.input.data(), &[0.0, 0.0, 5.0]);
}

#[test]
fn zero_loss_gradient_gives_zero_parameter_gradients() {
    let net = randomized_net(small_layers(true, 4), &[4, 8, 8], 3);
    let x = normal_tensor(&[3, 4, 8, 8], &mut rng(3));
    let (y, cache) = nn::forward(&net, &net.weights, &x, Mode::Train).unwrap();
    let g = nn::backward(&net, &cache, &Tensor::zeros(y.shape())).unwrap();
    assert!(g
        .weights
        .iter()
        .chain(&g.biases)
        .all(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(g
        .bn_gamma
        .iter()
        .chain(&g.bn_beta)
        .all(|v| v.iter().all(|&v| v == 0.0)));
}

#[test]
fn stale_cache_is_a_usage_error() {
    let a = randomized_net(small_layers(true, 4), &[4, 8, 8], 3);
    let b = randomized_net(small_layers(false, 4), &[4, 8, 8], 3);
    let x = normal_tensor(&[2, 4, 8, 8], &mut rng(3));
    let (y, cache) = nn::forward(&a, &a.weights, &x, Mode::Train).unwrap();
    let e = nn::backward(&b, &cache, &Tensor::zeros(y.shape())).unwrap_err();
    assert!(matches!(e, Error::Usage(_)), "{e}");
    let e = nn::backward(&a, &cache, &Tensor::zeros(&[2, 5])).unwrap_err();
    assert!(matches!(e, Error::Usage(_)));
}

#[test]
fn shape_mismatch_is_config_error_and_nan_is_numeric() {
    let net = randomized_net(small_layers(false, 4), &[4, 8, 8], 3);
    let e = nn::forward(
        &net,
        &net.weights,
        &Tensor::zeros(&[2, 3, 8, 8]),
        Mode::Infer,
    )
    .unwrap_err();
    assert_eq!(e.exit_code(), 1);
    let mut w = net.weights.clone();
    w[1].data_mut()[0] = f64::NAN;
    let e = nn::forward(&net, &w, &Tensor::zeros(&[1, 4, 8, 8]), Mode::Infer).unwrap_err();
    assert!(matches!(e, Error::Numeric { layer: 2, .. }), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn forward_is_deterministic() {
    let net = randomized_net(small_layers(true, 4), &[4, 8, 8], 9);
    let x = normal_tensor(&[4, 4, 8, 8], &mut rng(9));
    let a = nn::forward(&net, &net.weights, &x, Mode::Train).unwrap().0;
    let b = nn::forward(&net, &net.weights, &x, Mode::Train).unwrap().0;
    assert_eq!(a.data(), b.data());
}

#[test]
fn convolution_is_linear_in_weights() {
    let layers = vec![LayerSpec::conv(3, 3, 4, 2, 1), LayerSpec::Flatten];
    let mut net = Network::init(&[3, 6, 6], layers, 1).unwrap();
    net.biases[0] = Tensor::zeros(&[4]);
    let mut r = rng(5);
    let w1 = normal_tensor(net.weights[0].shape(), &mut r);
    let w2 = normal_tensor(net.weights[0].shape(), &mut r);
    let x = normal_tensor(&[2, 3, 6, 6], &mut r);
    let (a, b) = (0.7, -1.3);
    let mix = Tensor::from_fn(w1.shape(), |i| a * w1.data()[i] + b * w2.data()[i]);
    let f =
        |w: &Tensor| nn::forward_until(&net, std::slice::from_ref(w), &x, 1, Mode::Infer).unwrap();
    let (y, y1, y2) = (f(&mix), f(&w1), f(&w2));
    for i in 0..y.len() {
        assert!((y.data()[i] - (a * y1.data()[i] + b * y2.data()[i])).abs() < 1e-10);
    }
}

#[test]
fn train_mode_batch_norm_normalizes_each_channel() {
    let layers = vec![
        LayerSpec::conv(3, 2, 3, 1, 1),
        LayerSpec::batch_norm(3),
        LayerSpec::Flatten,
    ];
    let net = Network::init(&[2, 5, 5], layers, 4).unwrap();
    let mut r = rng(4);
    let x = Tensor::from_fn(&[6, 2, 5, 5], |i| {
        3.0 + 2.0 * (i as f64).sin() + rand::Rng::random_range(&mut r, 0.0..1.0)
    });
    let y = nn::forward_until(&net, &net.weights, &x, 2, Mode::Train).unwrap();
    let eps = 1e-5;
    let pre = nn::forward_until(&net, &net.weights, &x, 1, Mode::Train).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..6)
            .flat_map(|n| (0..25).map(move |p| (n * 3 + c) * 25 + p))
            .map(|i| y.data()[i])
            .collect();
        let raw: Vec<f64> = (0..6)
            .flat_map(|n| (0..25).map(move |p| (n * 3 + c) * 25 + p))
            .map(|i| pre.data()[i])
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        let rm = raw.iter().sum::<f64>() / raw.len() as f64;
        let rv = raw.iter().map(|x| (x - rm).powi(2)).sum::<f64>() / raw.len() as f64;
        assert!(m.abs() < 1e-6, "{m}");
        // gamma = 1: variance is rv / (rv + eps)
        assert!(
            (v - rv / (rv + eps)).abs() < 1e-6 && (v - 1.0).abs() < 1e-4,
            "{v}"
        );
    }
}

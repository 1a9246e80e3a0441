mod common;

use std::sync::OnceLock;

use common::*;
use robustproj::harness::{
    classification_error, evaluate, evaluate_with, sweep, trial_seed, EvalOptions, SweepSpec,
};
use robustproj::io::Dataset;
use robustproj::nn;
use robustproj::projections::{project_layers, ProjectionKind};
use robustproj::{Network, ProjectionSpec};

struct Fixture {
    train: Dataset,
    test: Dataset,
    sign_c: Network,
    none_nc: Network,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (train, test) = stripes(600, 300, 1.0);
        let sign_c = trained_toy(ProjectionSpec::Sign, true, 4, 1, &train);
        let none_nc = trained_toy(ProjectionSpec::None, false, 4, 1, &train);
        Fixture {
            train,
            test,
            sign_c,
            none_nc,
        }
    })
}

/// Error of `weights` after an independent two-pass recomputation of every
/// batch-norm layer's statistics.
fn oracle_error(
    net: &Network,
    weights: &[robustproj::Tensor],
    train: &Dataset,
    test: &Dataset,
) -> f64 {
    let mut snap = net.clone();
    let bn_layers: Vec<usize> = snap
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, robustproj::LayerSpec::BatchNorm { .. }))
        .map(|(i, _)| i)
        .collect();
    for (b, &li) in bn_layers.iter().enumerate() {
        let z = nn::forward_until(&snap, weights, &train.images, li, nn::Mode::Infer).unwrap();
        let c = z.shape()[1];
        let per = z.len() / (z.shape()[0] * c);
        let n = (z.shape()[0] * per) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, v) in z.data().iter().enumerate() {
            mean[(i / per) % c] += v / n;
        }
        for (i, v) in z.data().iter().enumerate() {
            let ch = (i / per) % c;
            var[ch] += (v - mean[ch]).powi(2) / n;
        }
        snap.bn[b].running_mean = mean;
        snap.bn[b].running_var = var;
    }
    classification_error(&snap, weights, test).unwrap()
}

#[test]
fn none_is_plain_error_with_recomputed_stats() {
    let f = fixture();
    let e = evaluate(&f.none_nc, &ProjectionSpec::None, &f.train, &f.test, 0).unwrap();
    let oracle = oracle_error(&f.none_nc, &f.none_nc.weights, &f.train, &f.test);
    assert!(
        (e - oracle).abs() <= 1.0 / f.test.len() as f64,
        "{e} vs {oracle}"
    );
}

#[test]
fn sign_evaluation_matches_manual_protocol() {
    let f = fixture();
    let w = project_layers(&f.none_nc.weights, &ProjectionSpec::Sign, 0, 0).unwrap();
    let e = evaluate(&f.none_nc, &ProjectionSpec::Sign, &f.train, &f.test, 0).unwrap();
    let oracle = oracle_error(&f.none_nc, &w, &f.train, &f.test);
    assert!(
        (e - oracle).abs() <= 1.0 / f.test.len() as f64,
        "{e} vs {oracle}"
    );
}

#[test]
fn neutral_distortions_equal_none() {
    let f = fixture();
    for net in [&f.sign_c, &f.none_nc] {
        let none = evaluate(net, &ProjectionSpec::None, &f.train, &f.test, 3).unwrap();
        let add0 = evaluate(
            net,
            &ProjectionSpec::AddNorm { sigma: 0.0 },
            &f.train,
            &f.test,
            3,
        )
        .unwrap();
        let pow1 = evaluate(
            net,
            &ProjectionSpec::Power { beta: 1.0 },
            &f.train,
            &f.test,
            3,
        )
        .unwrap();
        let mult1 = evaluate(
            net,
            &ProjectionSpec::MultUnif { gamma: 1.0 },
            &f.train,
            &f.test,
            3,
        )
        .unwrap();
        assert_eq!(none, add0);
        assert_eq!(none, pow1);
        assert_eq!(none, mult1);
    }
}

#[test]
fn one_point_sweep_equals_evaluate() {
    let f = fixture();
    let mut sw = SweepSpec::new(ProjectionKind::AddNorm, vec![0.3], 11);
    sw.trials = Some(1);
    let r = sweep(&f.sign_c, &sw, &f.train, &f.test, "toy").unwrap();
    let e = evaluate(
        &f.sign_c,
        &ProjectionSpec::AddNorm { sigma: 0.3 },
        &f.train,
        &f.test,
        trial_seed(11, 0, 0),
    )
    .unwrap();
    assert_eq!(r.points.len(), 1);
    assert_eq!(r.points[0].mean_error, e);
    assert_eq!(r.points[0].std_error, 0.0);
}

#[test]
fn sweep_is_deterministic_and_reports_spread() {
    let f = fixture();
    let sw = SweepSpec::new(ProjectionKind::AddNorm, vec![0.0, 0.5], 2);
    let a = sweep(&f.sign_c, &sw, &f.train, &f.test, "toy").unwrap();
    let b = sweep(&f.sign_c, &sw, &f.train, &f.test, "toy").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.points[0].trials, 5);
    assert_eq!(a.points[0].std_error, 0.0);
    let c = sweep(
        &f.sign_c,
        &SweepSpec { seed: 3, ..sw },
        &f.train,
        &f.test,
        "toy",
    )
    .unwrap();
    assert_eq!(a.points[0], c.points[0]);
}

#[test]
fn evaluation_order_does_not_matter() {
    let f = fixture();
    let specs = [
        ProjectionSpec::Sign,
        ProjectionSpec::Stoch,
        ProjectionSpec::AddNorm { sigma: 0.4 },
    ];
    let fwd: Vec<f64> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| evaluate(&f.sign_c, s, &f.train, &f.test, i as u64).unwrap())
        .collect();
    let rev: Vec<f64> = specs
        .iter()
        .enumerate()
        .rev()
        .map(|(i, s)| evaluate(&f.sign_c, s, &f.train, &f.test, i as u64).unwrap())
        .collect();
    let rev: Vec<f64> = rev.into_iter().rev().collect();
    assert_eq!(fwd, rev);
}

#[test]
fn stale_statistics_hurt_sign_on_unconstrained_net() {
    let f = fixture();
    let fresh = evaluate(&f.none_nc, &ProjectionSpec::Sign, &f.train, &f.test, 0).unwrap();
    let stale = evaluate_with(
        &f.none_nc,
        &ProjectionSpec::Sign,
        &f.train,
        &f.test,
        0,
        EvalOptions {
            recompute_bn: false,
        },
    )
    .unwrap();
    assert!(stale > fresh, "stale {stale} fresh {fresh}");
}

#[test]
fn evaluation_leaves_network_untouched() {
    let f = fixture();
    let before = f.sign_c.clone();
    evaluate(&f.sign_c, &ProjectionSpec::Round, &f.train, &f.test, 0).unwrap();
    assert_eq!(before, f.sign_c);
}

#[test]
fn mult_unif_sweep_stays_in_range_and_rejects_bad_gamma() {
    let f = fixture();
    let sw = SweepSpec::new(ProjectionKind::MultUnif, vec![0.1, 1.0], 0);
    let r = sweep(&f.sign_c, &sw, &f.train, &f.test, "toy").unwrap();
    assert!(r.points.iter().all(|p| (0.0..=1.0).contains(&p.mean_error)));
    assert!(sweep(
        &f.sign_c,
        &SweepSpec::new(ProjectionKind::MultUnif, vec![1.5], 0),
        &f.train,
        &f.test,
        "toy"
    )
    .is_err());
    assert!(sweep(
        &f.sign_c,
        &SweepSpec::new(ProjectionKind::AddNorm, vec![], 0),
        &f.train,
        &f.test,
        "toy"
    )
    .is_err());
}

#[test]
fn empty_splits_are_input_errors() {
    let f = fixture();
    let empty = f.test.head(0);
    let e = evaluate(&f.sign_c, &ProjectionSpec::None, &f.train, &empty, 0).unwrap_err();
    assert_eq!(e.exit_code(), 1);
}

//! Test-time distortion evaluation.
//!
//! A trained network is scored under a distortion by drawing one distorted
//! weight set, recomputing batch-norm statistics on the training data under
//! those weights, and measuring classification error on the test data.
//! Biases and batch-norm parameters are never distorted.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::nn::{self, Network};
use crate::projections::{project_layers, ProjectionKind, ProjectionSpec};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

const PREDICT_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Re-estimate batch-norm statistics on the training data per distortion.
    pub recompute_bn: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { recompute_bn: true }
    }
}

/// Fraction of misclassified samples using `weights` in inference mode.
pub fn classification_error(net: &Network, weights: &[Tensor], data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("evaluation split is empty"));
    }
    let mut wrong = 0usize;
    for start in (0..data.len()).step_by(PREDICT_CHUNK) {
        let end = (start + PREDICT_CHUNK).min(data.len());
        let pred = nn::predict(net, weights, &data.images.slice_outer(start, end))?;
        wrong += pred
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, l)| p != l)
            .count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Test error of `net` under one draw of `spec`, with batch-norm statistics
/// recomputed on `train`.
pub fn evaluate(
    net: &Network,
    spec: &ProjectionSpec,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<f64> {
    evaluate_with(net, spec, train, test, seed, EvalOptions::default())
}

pub fn evaluate_with(
    net: &Network,
    spec: &ProjectionSpec,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    opts: EvalOptions,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::input(
            "evaluation needs non-empty train and test splits",
        ));
    }
    let weights = project_layers(&net.weights, spec, seed, 0)?;
    if opts.recompute_bn {
        let mut snapshot = net.clone();
        nn::recompute_bn_stats(&mut snapshot, &weights, &train.images)?;
        classification_error(&snapshot, &weights, test)
    } else {
        classification_error(net, &weights, test)
    }
}

/// A distortion kind swept over a parameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub kind: ProjectionKind,
    pub grid: Vec<f64>,
    /// Independent draws per grid point; defaults to 5 for stochastic kinds
    /// and 1 otherwise.
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SweepSpec {
    pub fn new(kind: ProjectionKind, grid: Vec<f64>, seed: u64) -> Self {
        Self {
            kind,
            grid,
            trials: None,
            seed,
        }
    }

    /// Sweep over the kind's default range.
    pub fn with_default_grid(kind: ProjectionKind, seed: u64) -> Result<Self> {
        let (a, b, n) = kind
            .default_grid()
            .ok_or_else(|| Error::input(format!("`{kind}` has no parameter to sweep")))?;
        Ok(Self::new(kind, linspace(a, b, n), seed))
    }

    pub fn trial_count(&self) -> usize {
        self.trials
            .unwrap_or(if self.kind.is_stochastic() { 5 } else { 1 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::config("sweep grid is empty"));
        }
        if self.trial_count() == 0 {
            return Err(Error::config("sweep needs at least one trial"));
        }
        for &v in &self.grid {
            self.kind
                .with_param(v)
                .map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(())
    }
}

/// `n` evenly spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Parses `start:stop:count` or a comma-separated list of values.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Error::input(format!("bad grid value `{t}`")))
    };
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [a, b, n] => {
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::input(format!("bad grid count `{n}`")))?;
            if n == 0 {
                return Err(Error::input("grid count must be positive"));
            }
            Ok(linspace(num(a)?, num(b)?, n))
        }
        [_] => s.split(',').map(num).collect(),
        _ => Err(Error::input(format!(
            "grid `{s}` is neither start:stop:count nor a list"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub parameter: f64,
    pub mean_error: f64,
    pub std_error: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub network_id: String,
    pub kind: ProjectionKind,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

/// Seed of trial `t` at grid point `g`.
pub fn trial_seed(sweep_seed: u64, g: usize, t: usize) -> u64 {
    rng::stream(sweep_seed, Domain::Sweep, g as u64, t as u64).random()
}

/// Runs `trials` independent evaluations per grid value. Grid points and
/// trials run in parallel; each has its own seed so the report does not
/// depend on scheduling.
pub fn sweep(
    net: &Network,
    sw: &SweepSpec,
    train: &Dataset,
    test: &Dataset,
    network_id: &str,
) -> Result<SweepReport> {
    sw.validate()?;
    let trials = sw.trial_count();
    let jobs: Vec<(usize, usize)> = (0..sw.grid.len())
        .flat_map(|g| (0..trials).map(move |t| (g, t)))
        .collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(g, t)| {
            let spec = sw.kind.with_param(sw.grid[g])?;
            evaluate(net, &spec, train, test, trial_seed(sw.seed, g, t))
        })
        .collect::<Result<_>>()?;
    let points = sw
        .grid
        .iter()
        .zip(errors.chunks(trials))
        .map(|(&parameter, errs)| {
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let std = if errs.len() > 1 {
                (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SweepPoint {
                parameter,
                mean_error: mean,
                std_error: std,
                trials: errs.len(),
            }
        })
        .collect();
    Ok(SweepReport {
        network_id: network_id.to_string(),
        kind: sw.kind,
        seed: sw.seed,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0:0.7:8").unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], 0.0);
        assert!((g[7] - 0.7).abs() < 1e-15);
        assert!((g[1] - 0.1).abs() < 1e-15);
        assert_eq!(parse_grid("0.1, 0.5").unwrap(), vec![0.1, 0.5]);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("a").is_err());
    }

    #[test]
    fn default_trials_and_grids() {
        let s = SweepSpec::with_default_grid(ProjectionKind::AddNorm, 0).unwrap();
        assert_eq!(s.trial_count(), 5);
        assert_eq!(s.grid.first(), Some(&0.0));
        assert!((s.grid.last().unwrap() - 0.7).abs() < 1e-12);
        let p = SweepSpec::with_default_grid(ProjectionKind::Power, 0).unwrap();
        assert_eq!(p.trial_count(), 1);
        assert_eq!(p.grid.last(), Some(&2.0));
        let m = SweepSpec::with_default_grid(ProjectionKind::MultUnif, 0).unwrap();
        assert_eq!(m.grid.first(), Some(&0.1));
        assert!(SweepSpec::with_default_grid(ProjectionKind::Sign, 0).is_err());
        let bad = SweepSpec::new(ProjectionKind::MultUnif, vec![0.0], 0);
        assert!(bad.validate().is_err());
    }
}

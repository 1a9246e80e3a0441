//! Small deterministic image-classification tasks.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// A fixed random template per class plus pixel noise.
    Blobs,
    /// Sinusoidal gratings with a class-specific orientation and a random
    /// phase per image, plus pixel noise.
    Stripes,
}

fn default_size() -> usize {
    8
}
fn default_channels() -> usize {
    1
}
fn default_period() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Standard deviation of additive pixel noise.
    #[serde(default)]
    pub noise: f64,
    /// Grating period in pixels (stripes only).
    #[serde(default = "default_period")]
    pub period: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, classes: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind,
            classes,
            size: default_size(),
            channels: default_channels(),
            noise,
            period: default_period(),
            seed,
        }
    }
}

/// `n` images with labels `i mod classes`. Train and test splits of the same
/// spec share class templates but draw independent samples.
pub fn synthetic_dataset(spec: &SyntheticSpec, n: usize, split: Split) -> Result<Dataset> {
    if spec.classes < 2 || n < spec.classes {
        return Err(Error::input(format!(
            "need n >= classes >= 2, got n={n}, classes={}",
            spec.classes
        )));
    }
    if spec.size == 0 || spec.channels == 0 || !(spec.noise >= 0.0) || !(spec.period > 0.0) {
        return Err(Error::input(
            "synthetic size, channels and period must be positive, noise non-negative",
        ));
    }
    let (c, s) = (spec.channels, spec.size);
    let per = c * s * s;
    let split_tag = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|k| {
            let mut r = rng::stream(spec.seed, Domain::Data, 0, k as u64);
            (0..per).map(|_| StandardNormal.sample(&mut r)).collect()
        })
        .collect();

    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.classes;
        let mut r = rng::stream(spec.seed, Domain::Data, split_tag, i as u64);
        match spec.kind {
            SyntheticKind::Blobs => data.extend(templates[label].iter().copied()),
            SyntheticKind::Stripes => {
                let theta = PI * label as f64 / spec.classes as f64;
                let phase = r.random_range(0.0..2.0 * PI);
                let (ct, st) = (theta.cos(), theta.sin());
                for _ in 0..c {
                    for y in 0..s {
                        for x in 0..s {
                            let u = x as f64 * ct + y as f64 * st;
                            data.push((2.0 * PI * u / spec.period + phase).cos());
                        }
                    }
                }
            }
        }
        if spec.noise > 0.0 {
            let start = data.len() - per;
            for v in &mut data[start..] {
                let z: f64 = StandardNormal.sample(&mut r);
                *v += spec.noise * z;
            }
        }
        labels.push(label);
    }
    Dataset::new(
        Tensor::new(vec![n, c, s, s], data)?,
        labels,
        spec.classes,
        split,
    )
}

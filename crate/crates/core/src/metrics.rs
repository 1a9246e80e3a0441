//! Robustness diagnostics: effective bits per weight, weight-to-projection
//! gap, activation correlation between clean and projected passes, and
//! weight histograms.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::nn::{self, LayerSpec, Mode, Network};
use crate::projections::{layer_alpha, project_layers, ProjectionSpec};
use crate::tensor::Tensor;

/// Effective bits `½·log₂(1 + Q_w/Q_n)` of a signal with second moment
/// `q_w` under noise with second moment `q_n`. Noise-free gives infinity.
pub fn effective_bits(q_w: f64, q_n: f64) -> Result<f64> {
    if !(q_w >= 0.0) || !(q_n >= 0.0) {
        return Err(Error::input(format!(
            "second moments must be non-negative, got {q_w} and {q_n}"
        )));
    }
    if q_n == 0.0 {
        return Ok(if q_w == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(0.5 * (q_w / q_n).ln_1p() / std::f64::consts::LN_2)
}

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerBits {
    pub layer: usize,
    pub weights: usize,
    pub q_w: f64,
    pub q_n: f64,
    #[serde(serialize_with = "finite_or_inf")]
    pub bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitsReport {
    pub distortion: ProjectionSpec,
    pub layers: Vec<LayerBits>,
    /// Per-layer bits averaged with weight counts as weights.
    #[serde(serialize_with = "finite_or_inf")]
    pub weighted_bits: f64,
    /// Whole-network moments pooled over all weights.
    pub pooled_q_w: f64,
    pub pooled_q_n: f64,
    #[serde(serialize_with = "finite_or_inf")]
    pub pooled_bits: f64,
}

/// Second moment of the noise `spec` adds to a layer with weights `w`.
///
/// AddNorm adds `N(0, ασ)`, so `Q_n = α²σ²`. MultUnif adds `w·(U − 1)` with
/// `U ~ U(γ, 1/γ)`, so `Q_n = Q_w·E[(U − 1)²]`.
pub fn noise_second_moment(w: &Tensor, spec: &ProjectionSpec) -> Result<f64> {
    match *spec {
        ProjectionSpec::AddNorm { sigma } => {
            let a = layer_alpha(w);
            Ok(a * a * sigma * sigma)
        }
        ProjectionSpec::MultUnif { gamma } => {
            let (lo, hi) = (gamma, 1.0 / gamma);
            let mean = (lo + hi) / 2.0;
            let var = (hi - lo).powi(2) / 12.0;
            Ok(second_moment(w) * (var + (mean - 1.0).powi(2)))
        }
        _ => Err(Error::input(format!(
            "no additive-noise model for `{spec}`"
        ))),
    }
}

fn second_moment(w: &Tensor) -> f64 {
    w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64
}

pub fn bits_report(net: &Network, spec: &ProjectionSpec) -> Result<BitsReport> {
    let mut layers = Vec::new();
    let (mut sum_qw, mut sum_qn, mut total) = (0.0, 0.0, 0usize);
    for (k, w) in net.weights.iter().enumerate() {
        let q_w = second_moment(w);
        let q_n = noise_second_moment(w, spec)?;
        let n = w.len();
        sum_qw += q_w * n as f64;
        sum_qn += q_n * n as f64;
        total += n;
        layers.push(LayerBits {
            layer: k,
            weights: n,
            q_w,
            q_n,
            bits: effective_bits(q_w, q_n)?,
        });
    }
    if total == 0 {
        return Err(Error::input("network has no weights"));
    }
    let weighted_bits = layers
        .iter()
        .map(|l| l.bits * l.weights as f64)
        .sum::<f64>()
        / total as f64;
    let pooled_q_w = sum_qw / total as f64;
    let pooled_q_n = sum_qn / total as f64;
    Ok(BitsReport {
        distortion: *spec,
        layers,
        weighted_bits,
        pooled_q_w,
        pooled_q_n,
        pooled_bits: effective_bits(pooled_q_w, pooled_q_n)?,
    })
}

/// Per layer, mean of `|w_i − proj(w)_i|` for a deterministic projection.
pub fn weight_gap(net: &Network, spec: &ProjectionSpec) -> Result<Vec<f64>> {
    if spec.is_stochastic() {
        return Err(Error::input(format!(
            "weight gap needs a deterministic projection, got `{spec}`"
        )));
    }
    let projected = project_layers(&net.weights, spec, 0, 0)?;
    Ok(net
        .weights
        .iter()
        .zip(&projected)
        .map(|(w, p)| {
            w.data()
                .iter()
                .zip(p.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / w.len().max(1) as f64
        })
        .collect())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.is_empty() {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Layer index whose output is the activity of parametric layer `k`: the
/// last layer before the next parametric layer (after its norm and ReLU).
fn block_outputs(layers: &[LayerSpec]) -> Vec<usize> {
    let starts: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_parametric())
        .map(|(i, _)| i)
        .collect();
    starts
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let end = starts.get(k + 1).copied().unwrap_or(layers.len());
            // a trailing flatten only reshapes
            let mut last = end - 1;
            while last > starts[k] && matches!(layers[last], LayerSpec::Flatten) {
                last -= 1;
            }
            last
        })
        .collect()
}

/// Per parametric layer, correlation between the block outputs of two
/// inference passes over `batch`: one with the stored weights, one with
/// `project(W, spec)`. Each pass first recomputes its batch-norm statistics
/// on `bn_data`.
pub fn activation_correlation(
    net: &Network,
    spec: &ProjectionSpec,
    batch: &Tensor,
    bn_data: &Tensor,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    if batch.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::input(
            "activation correlation needs a non-empty batch",
        ));
    }
    let projected = project_layers(&net.weights, spec, seed, 0)?;
    let pass = |weights: &[Tensor]| -> Result<nn::Cache> {
        let mut snapshot = net.clone();
        nn::recompute_bn_stats(&mut snapshot, weights, bn_data)?;
        Ok(nn::forward(&snapshot, weights, batch, Mode::Infer)?.1)
    };
    let clean = pass(&net.weights)?;
    let distorted = pass(&projected)?;
    Ok(block_outputs(&net.layers)
        .into_iter()
        .map(|i| pearson(clean.output_of(i).data(), distorted.output_of(i).data()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges from min to max.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over `[min, max]`; the top edge is inclusive.
pub fn weight_histogram(w: &Tensor, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::input("histogram needs at least one bin"));
    }
    if w.is_empty() {
        return Err(Error::input("histogram of an empty tensor"));
    }
    let lo = w.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0; bins];
    for &v in w.data() {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub mean_abs_gap: f64,
    /// `None` when either pass has constant activity.
    pub correlation: Option<f64>,
    pub histogram: Histogram,
}

pub fn layer_diagnostics(
    net: &Network,
    spec: &ProjectionSpec,
    batch: &Tensor,
    bn_data: &Tensor,
    bins: usize,
) -> Result<Vec<LayerDiagnostics>> {
    let gaps = weight_gap(net, spec)?;
    let corr = activation_correlation(net, spec, batch, bn_data, 0)?;
    net.weights
        .iter()
        .enumerate()
        .map(|(k, w)| {
            Ok(LayerDiagnostics {
                layer: k,
                mean_abs_gap: gaps[k],
                correlation: corr[k],
                histogram: weight_histogram(w, bins)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_examples() {
        assert_eq!(effective_bits(1.0, 1.0).unwrap(), 0.5);
        assert_eq!(effective_bits(3.0, 1.0).unwrap(), 1.0);
        assert_eq!(effective_bits(0.0, 2.0).unwrap(), 0.0);
        assert_eq!(effective_bits(1.0, 0.0).unwrap(), f64::INFINITY);
        assert!(effective_bits(-1.0, 1.0).is_err());
    }

    #[test]
    fn bits_monotone_in_ratio() {
        let mut prev = -1.0;
        for i in 0..200 {
            let b = effective_bits(i as f64 * 0.05, 1.0).unwrap();
            assert!(b > prev);
            prev = b;
        }
    }

    #[test]
    fn histogram_examples() {
        let h = weight_histogram(&Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap(), 2).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
        assert_eq!(h.edges, vec![-1.0, 0.0, 1.0]);
        let c = weight_histogram(&Tensor::new(vec![4], vec![0.3; 4]).unwrap(), 5).unwrap();
        assert_eq!(c.counts.iter().filter(|&&n| n > 0).count(), 1);
        assert_eq!(c.counts.iter().sum::<usize>(), 4);
        assert!(weight_histogram(&Tensor::zeros(&[1]), 0).is_err());
    }

    #[test]
    fn pearson_degenerate_and_symmetric() {
        assert_eq!(pearson(&[0.0, 0.0], &[1.0, 2.0]), None);
        let a = [0.1, 0.5, -0.3, 2.0];
        let b = [1.0, 0.2, 0.3, -0.7];
        assert_eq!(pearson(&a, &b), pearson(&b, &a));
        assert_eq!(pearson(&a, &a), Some(1.0));
    }

    #[test]
    fn infinite_bits_serialize_symbolically() {
        let l = LayerBits {
            layer: 0,
            weights: 1,
            q_w: 1.0,
            q_n: 0.0,
            bits: f64::INFINITY,
        };
        let j = serde_json::to_value(&l).unwrap();
        assert_eq!(j["bits"], "inf");
    }
}

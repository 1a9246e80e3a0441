//! Exact batch-norm statistics over a whole dataset.

use super::kernels::BnGeom;
use super::pass::{forward_range, forward_until, Mode};
use super::{chain_shapes, Network, Slot};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples per forward chunk when sweeping a dataset.
pub const BN_RECOMPUTE_CHUNK: usize = 256;

/// Datasets whose widest activation fits in this many values are swept
/// once, keeping activations between batch-norm layers; larger ones re-run
/// the prefix of the network for every layer and moment.
pub const BN_RESIDENT_LIMIT: usize = 1 << 25;

/// Replaces every batch norm's running mean and variance with the exact
/// per-channel moments of its input over `data`, computed under `weights`.
///
/// Layers are processed in order so each one sees inputs normalized with the
/// already-recomputed statistics of the layers before it. Moments are
/// two-pass (mean, then squared deviations) and the variance is the
/// population variance. Gamma and beta are left unchanged.
pub fn recompute_bn_stats(net: &mut Network, weights: &[Tensor], data: &Tensor) -> Result<()> {
    recompute_with_limit(net, weights, data, BN_RESIDENT_LIMIT)
}

pub(crate) fn recompute_with_limit(
    net: &mut Network,
    weights: &[Tensor],
    data: &Tensor,
    limit: usize,
) -> Result<()> {
    let n = data.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::input("batch-norm recompute needs non-empty data"));
    }
    let widest = chain_shapes(&net.input_shape, &net.layers)?
        .iter()
        .map(|s| s.iter().product::<usize>())
        .max()
        .unwrap_or(0);
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(BN_RECOMPUTE_CHUNK)
        .map(|s| (s, (s + BN_RECOMPUTE_CHUNK).min(n)))
        .collect();
    let slots = net.slots();
    let bn_layers: Vec<(usize, usize)> = slots
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            Slot::Bn(j) => Some((i, *j)),
            _ => None,
        })
        .collect();

    if widest.saturating_mul(n) <= limit {
        // Chunk activations at the input of the next batch-norm layer.
        let mut resident: Vec<Tensor> = chunks
            .iter()
            .map(|&(s, e)| data.slice_outer(s, e))
            .collect();
        let mut at = 0;
        for &(i, j) in &bn_layers {
            resident = resident
                .into_iter()
                .map(|x| forward_range(net, weights, x, at, i, Mode::Infer))
                .collect::<Result<_>>()?;
            let (mean, var) = moments(&resident, net.bn[j].running_mean.len());
            let st = &mut net.bn[j];
            st.running_mean = mean;
            st.running_var = var;
            at = i;
        }
        return Ok(());
    }

    for &(i, j) in &bn_layers {
        let channels = net.bn[j].running_mean.len();
        let prefix = |s: usize, e: usize| {
            forward_until(net, weights, &data.slice_outer(s, e), i, Mode::Infer)
        };
        let mut sum = vec![0.0; channels];
        let mut count = 0usize;
        for &(s, e) in &chunks {
            let x = prefix(s, e)?;
            count += accumulate(&x, &mut sum, |v, _| v);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; channels];
        for &(s, e) in &chunks {
            let x = prefix(s, e)?;
            accumulate(&x, &mut sq, |v, ch| {
                let d = v - mean[ch];
                d * d
            });
        }
        let st = &mut net.bn[j];
        st.running_mean = mean;
        st.running_var = sq.iter().map(|q| q / count as f64).collect();
    }
    Ok(())
}

/// Adds `f(value, channel)` into `acc` per channel; returns the element count
/// per channel.
fn accumulate(x: &Tensor, acc: &mut [f64], f: impl Fn(f64, usize) -> f64) -> usize {
    let g = geom(x);
    for (ch, a) in acc.iter_mut().enumerate() {
        g.for_channel(ch, |k| *a += f(x.data()[k], ch));
    }
    g.count()
}

fn moments(chunks: &[Tensor], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; channels];
    let mut count = 0usize;
    for x in chunks {
        count += accumulate(x, &mut sum, |v, _| v);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; channels];
    for x in chunks {
        accumulate(x, &mut sq, |v, ch| {
            let d = v - mean[ch];
            d * d
        });
    }
    (mean, sq.iter().map(|q| q / count as f64).collect())
}

fn geom(x: &Tensor) -> BnGeom {
    let s = x.shape();
    BnGeom {
        n: s[0],
        c: s[1],
        spatial: s[2..].iter().product(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use crate::rng::{self, Domain};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn resident_and_streaming_paths_agree_exactly() {
        let layers = vec![
            LayerSpec::conv(3, 2, 4, 1, 1),
            LayerSpec::batch_norm(4),
            LayerSpec::Relu,
            LayerSpec::conv(3, 4, 4, 2, 1),
            LayerSpec::batch_norm(4),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(16, 3),
            LayerSpec::batch_norm(3),
        ];
        let net = Network::init(&[2, 4, 4], layers, 3).unwrap();
        let mut r = rng::stream(3, Domain::Test, 0, 0);
        let data = Tensor::from_fn(&[600, 2, 4, 4], |_| StandardNormal.sample(&mut r));
        let mut a = net.clone();
        let mut b = net.clone();
        recompute_with_limit(&mut a, &net.weights, &data, usize::MAX).unwrap();
        recompute_with_limit(&mut b, &net.weights, &data, 0).unwrap();
        assert_eq!(a.bn, b.bn);
        assert_ne!(a.bn, net.bn);
    }
}

//! Direct-summation layer kernels on flat row-major buffers.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output positions `lo..hi` whose input coordinate `o * stride + k - pad`
    /// lies inside `0..extent`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(s)
        } else {
            0
        };
        let hi = if extent + self.pad > k {
            ((extent + self.pad - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Patch matrix of one sample: row `p` (output position) holds the
    /// receptive field in `(ci, ky, kx)` order, zeros where padded.
    fn im2col(&self, xs: &[f64], cols: &mut [f64]) {
        let q_len = self.patch_len();
        let in_plane = self.h * self.w;
        cols.fill(0.0);
        for ci in 0..self.cin {
            let xi = &xs[ci * in_plane..][..in_plane];
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.kw {
                    let q = (ci * self.kh + ky) * self.kw + kx;
                    let (ox0, ox1) = self.valid(kx, self.w, self.wo);
                    for oy in oy0..oy1 {
                        let row = &xi[(oy * self.stride + ky - self.pad) * self.w..][..self.w];
                        for ox in ox0..ox1 {
                            cols[(oy * self.wo + ox) * q_len + q] =
                                row[ox * self.stride + kx - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adds patch gradients back onto the sample's input gradient.
    fn col2im(&self, dcols: &[f64], dxs: &mut [f64]) {
        let q_len = self.patch_len();
        let in_plane = self.h * self.w;
        for ci in 0..self.cin {
            let dxi = &mut dxs[ci * in_plane..][..in_plane];
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.kw {
                    let q = (ci * self.kh + ky) * self.kw + kx;
                    let (ox0, ox1) = self.valid(kx, self.w, self.wo);
                    for oy in oy0..oy1 {
                        let row = &mut dxi[(oy * self.stride + ky - self.pad) * self.w..][..self.w];
                        for ox in ox0..ox1 {
                            row[ox * self.stride + kx - self.pad] +=
                                dcols[(oy * self.wo + ox) * q_len + q];
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four interleaved accumulators, summed in a fixed order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ta) = a.split_at(a.len() - a.len() % 4);
    let (cb, tb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let out_plane = g.ho * g.wo;
    let in_plane = g.cin * g.h * g.w;
    let q_len = g.patch_len();
    let mut cols = vec![0.0; out_plane * q_len];
    let mut y = vec![0.0; g.n * g.cout * out_plane];
    for n in 0..g.n {
        g.im2col(&x[n * in_plane..][..in_plane], &mut cols);
        for co in 0..g.cout {
            let wr = &wt[co * q_len..][..q_len];
            let yo = &mut y[(n * g.cout + co) * out_plane..][..out_plane];
            for (p, o) in yo.iter_mut().enumerate() {
                *o = bias[co] + dot(wr, &cols[p * q_len..][..q_len]);
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_plane = g.ho * g.wo;
    let in_plane = g.cin * g.h * g.w;
    let q_len = g.patch_len();
    let mut cols = vec![0.0; out_plane * q_len];
    let mut dcols = vec![0.0; out_plane * q_len];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wt.len()];
    let mut db = vec![0.0; g.cout];
    for n in 0..g.n {
        g.im2col(&x[n * in_plane..][..in_plane], &mut cols);
        dcols.fill(0.0);
        for co in 0..g.cout {
            let dyo = &dy[(n * g.cout + co) * out_plane..][..out_plane];
            db[co] += dyo.iter().sum::<f64>();
            let wr = &wt[co * q_len..][..q_len];
            let dwr = &mut dw[co * q_len..][..q_len];
            for (p, &d) in dyo.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, &cols[p * q_len..][..q_len], dwr);
                    axpy(d, wr, &mut dcols[p * q_len..][..q_len]);
                }
            }
        }
        g.col2im(&dcols, &mut dx[n * in_plane..][..in_plane]);
    }
    (dx, dw, db)
}

/// `y = x Wᵀ + b` with `x: (n, fin)`, `W: (fout, fin)`.
pub(crate) fn dense_forward(
    n: usize,
    fin: usize,
    fout: usize,
    x: &[f64],
    wt: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; n * fout];
    for s in 0..n {
        let xs = &x[s * fin..][..fin];
        for o in 0..fout {
            let wr = &wt[o * fin..][..fin];
            y[s * fout + o] = bias[o] + dot(xs, wr);
        }
    }
    y
}

pub(crate) fn dense_backward(
    n: usize,
    fin: usize,
    fout: usize,
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * fin];
    let mut dw = vec![0.0; fout * fin];
    let mut db = vec![0.0; fout];
    for s in 0..n {
        let xs = &x[s * fin..][..fin];
        let dxs = &mut dx[s * fin..][..fin];
        for o in 0..fout {
            let d = dy[s * fout + o];
            db[o] += d;
            axpy(d, xs, &mut dw[o * fin..][..fin]);
            axpy(d, &wt[o * fin..][..fin], dxs);
        }
    }
    (dx, dw, db)
}

/// Layout of a batch-norm input: `n` samples, `c` channels, `spatial`
/// positions per channel (1 for flat activations).
#[derive(Debug, Clone, Copy)]
pub(crate) struct BnGeom {
    pub n: usize,
    pub c: usize,
    pub spatial: usize,
}

impl BnGeom {
    pub fn count(&self) -> usize {
        self.n * self.spatial
    }

    /// Visits every element of channel `ch` in a fixed order.
    #[inline]
    pub fn for_channel(&self, ch: usize, mut f: impl FnMut(usize)) {
        for s in 0..self.n {
            let base = (s * self.c + ch) * self.spatial;
            for p in 0..self.spatial {
                f(base + p);
            }
        }
    }
}

/// Two-pass per-channel mean and (biased) variance.
pub(crate) fn channel_moments(g: &BnGeom, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = g.count() as f64;
    let mut mean = vec![0.0; g.c];
    let mut var = vec![0.0; g.c];
    for ch in 0..g.c {
        let mut s = 0.0;
        g.for_channel(ch, |i| s += x[i]);
        let mu = s / m;
        let mut q = 0.0;
        g.for_channel(ch, |i| {
            let d = x[i] - mu;
            q += d * d;
        });
        mean[ch] = mu;
        var[ch] = q / m;
    }
    (mean, var)
}

/// Normalizes with the given statistics; returns `(y, xhat, inv_std)`.
pub(crate) fn bn_apply(
    g: &BnGeom,
    x: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for ch in 0..g.c {
        g.for_channel(ch, |i| {
            let h = (x[i] - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            y[i] = gamma[ch] * h + beta[ch];
        });
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the statistics are
/// treated as functions of `x`; otherwise they are constants.
pub(crate) fn bn_backward(
    g: &BnGeom,
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dy: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = g.count() as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; g.c];
    let mut dbeta = vec![0.0; g.c];
    for ch in 0..g.c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        g.for_channel(ch, |i| {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * xhat[i];
        });
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * inv_std[ch];
        if batch_stats {
            g.for_channel(ch, |i| {
                dx[i] = scale * (dy[i] - sum_dy / m - xhat[i] * sum_dy_xhat / m);
            });
        } else {
            g.for_channel(ch, |i| dx[i] = scale * dy[i]);
        }
    }
    (dx, dgamma, dbeta)
}

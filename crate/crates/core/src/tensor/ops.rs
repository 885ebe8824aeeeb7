//! Raw kernels over flat row-major buffers. Shapes are validated by the tape
//! before these are called. All dot products accumulate in `f64` with a fixed
//! loop order, so results are bit-reproducible for a given build.

use super::Real;

pub(super) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a[i * k + p].f64() * b[p * n + j].f64();
            }
            out[i * n + j] = T::of(acc);
        }
    }
    out
}

/// `a^T · g` for `a: [m, k]`, `g: [m, n]`.
pub(super) fn matmul_tn<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for p in 0..k {
        for j in 0..n {
            let mut acc = 0.0f64;
            for i in 0..m {
                acc += a[i * k + p].f64() * g[i * n + j].f64();
            }
            out[p * n + j] = T::of(acc);
        }
    }
    out
}

/// `g · b^T` for `g: [m, n]`, `b: [k, n]`.
pub(super) fn matmul_nt<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += g[i * n + j].f64() * b[p * n + j].f64();
            }
            out[i * k + p] = T::of(acc);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(super) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }
    pub fn out_w(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if inside.
    #[inline]
    fn source(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let pos = (o + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub(super) fn conv2d<T: Real>(x: &[T], w: &[T], d: ConvDims) -> Vec<T> {
    let (oh, ow, k) = (d.out_h(), d.out_w(), d.kernel);
    let mut out = vec![T::zero(); d.batch * d.out_ch * oh * ow];
    for n in 0..d.batch {
        for o in 0..d.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..d.in_ch {
                        let xbase = (n * d.in_ch + c) * d.height * d.width;
                        let wbase = (o * d.in_ch + c) * k * k;
                        for a in 0..k {
                            let Some(y) = d.source(i, a, d.height) else { continue };
                            for b in 0..k {
                                let Some(xx) = d.source(j, b, d.width) else { continue };
                                acc += x[xbase + y * d.width + xx].f64() * w[wbase + a * k + b].f64();
                            }
                        }
                    }
                    out[((n * d.out_ch + o) * oh + i) * ow + j] = T::of(acc);
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d` with respect to input and kernel.
pub(super) fn conv2d_backward<T: Real>(x: &[T], w: &[T], g: &[T], d: ConvDims) -> (Vec<T>, Vec<T>) {
    let (oh, ow, k) = (d.out_h(), d.out_w(), d.kernel);
    let mut dx = vec![0.0f64; x.len()];
    let mut dw = vec![0.0f64; w.len()];
    for n in 0..d.batch {
        for o in 0..d.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    let gv = g[((n * d.out_ch + o) * oh + i) * ow + j].f64();
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..d.in_ch {
                        let xbase = (n * d.in_ch + c) * d.height * d.width;
                        let wbase = (o * d.in_ch + c) * k * k;
                        for a in 0..k {
                            let Some(y) = d.source(i, a, d.height) else { continue };
                            for b in 0..k {
                                let Some(xx) = d.source(j, b, d.width) else { continue };
                                let xi = xbase + y * d.width + xx;
                                let wi = wbase + a * k + b;
                                dx[xi] += gv * w[wi].f64();
                                dw[wi] += gv * x[xi].f64();
                            }
                        }
                    }
                }
            }
        }
    }
    (dx.into_iter().map(T::of).collect(), dw.into_iter().map(T::of).collect())
}

/// Layout helper for `[N, C, spatial...]` tensors.
#[derive(Clone, Copy, Debug)]
pub(super) struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl ChannelLayout {
    pub fn of(shape: &[usize]) -> Self {
        Self { batch: shape[0], channels: shape[1], spatial: shape[2..].iter().product() }
    }

    /// Number of values pooled into each channel statistic.
    pub fn per_channel(&self) -> usize {
        self.batch * self.spatial
    }

    #[inline]
    pub fn channel_of(&self, flat: usize) -> usize {
        (flat / self.spatial) % self.channels
    }
}

pub(super) fn channel_mean<T: Real>(x: &[T], l: ChannelLayout) -> Vec<f64> {
    let mut sums = vec![0.0f64; l.channels];
    for (i, v) in x.iter().enumerate() {
        sums[l.channel_of(i)] += v.f64();
    }
    let m = l.per_channel() as f64;
    sums.into_iter().map(|s| s / m).collect()
}

/// Biased per-channel variance (divides by the pooled count).
pub(super) fn channel_var<T: Real>(x: &[T], l: ChannelLayout) -> (Vec<f64>, Vec<f64>) {
    let mean = channel_mean(x, l);
    let mut sums = vec![0.0f64; l.channels];
    for (i, v) in x.iter().enumerate() {
        let c = l.channel_of(i);
        let d = v.f64() - mean[c];
        sums[c] += d * d;
    }
    let m = l.per_channel() as f64;
    (mean, sums.into_iter().map(|s| s / m).collect())
}

/// Row-wise log-sum-exp over the last dimension of a `[rows, cols]` view.
pub(super) fn row_logsumexp<T: Real>(x: &[T], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .map(|row| {
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
            max + s.ln()
        })
        .collect()
}

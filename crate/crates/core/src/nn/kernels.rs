//! Forward and backward kernels on flat slices. The graph layer handles
//! shapes and bookkeeping; everything here is plain loops and GEMM calls.

use crate::error::{Error, Result};

use super::graph::ConvSpec;
use super::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(batch: usize, cin: usize, h: usize, w: usize, spec: &ConvSpec) -> Result<Self> {
        let (ho, wo) = spec.output_hw(h, w)?;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout: spec.out_channels,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            ho,
            wo,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one sample `(cin, h, w)` into a `(cin*kh*kw, ho*wo)` matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii as usize >= g.h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.sw + kj) as isize - g.pw as isize;
                        *v = if jj < 0 || jj as usize >= g.w {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `(cin, h, w)`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.sw + kj) as isize - g.pw as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.patch(), g.positions());
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let mut cols = vec![T::zero(); k * p];
    let in_stride = g.cin * g.h * g.w;
    for n in 0..g.batch {
        im2col(&x[n * in_stride..(n + 1) * in_stride], g, &mut cols);
        let y = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        for (co, row) in y.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = b[co]);
        }
        gemm(g.cout, k, p, T::one(), w, false, &cols, false, y, true);
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is skipped when the input needs no gradient.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (k, p) = (g.patch(), g.positions());
    let in_stride = g.cin * g.h * g.w;
    let mut dw = vec![T::zero(); g.cout * k];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];
    for n in 0..g.batch {
        let dyn_ = &dy[n * g.cout * p..(n + 1) * g.cout * p];
        for (co, row) in dyn_.chunks(p).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
        im2col(&x[n * in_stride..(n + 1) * in_stride], g, &mut cols);
        // dW (cout x k) += dY (cout x p) * cols^T (p x k)
        gemm(g.cout, p, k, T::one(), dyn_, false, &cols, true, &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            // dcols (k x p) = W^T (k x cout) * dY (cout x p)
            gemm(k, g.cout, p, T::one(), w, true, dyn_, false, &mut dcols, false);
            col2im(&dcols, g, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    (dx, dw, db)
}

/// Per-channel statistics of an `(n, c, h, w)` tensor, two-pass.
pub(crate) fn channel_stats<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::lit((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut ss = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * hw..][..hw] {
                ss += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = ss / count;
    }
    (mean, var)
}

/// Applies `y = gamma * (x - mean) * inv_std + beta` per channel; returns `(y, xhat)`.
pub(crate) fn batchnorm_apply<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Batch-statistics backward: returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_train_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    n: usize,
    c: usize,
    hw: usize,
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::lit((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = gamma[ch] * inv_std[ch] / count;
            for i in off..off + hw {
                dx[i] = scale * (count * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Running-statistics backward (the normalisation is a fixed affine map).
pub(crate) fn batchnorm_eval_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    n: usize,
    c: usize,
    hw: usize,
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
                dx[i] = dy[i] * gamma[ch] * inv_std[ch];
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Layer norm over rows of length `n`; returns `(y, xhat, inv_std per row)`.
pub(crate) fn layer_norm_forward<T: Real>(
    x: &[T],
    n: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / n;
    let nn = T::lit(n as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<T>() / nn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
        let is = T::one() / (var + eps).sqrt();
        inv[r] = is;
        for j in 0..n {
            let h = (row[j] - mean) * is;
            xhat[r * n + j] = h;
            y[r * n + j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, inv)
}

pub(crate) fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv: &[T],
    n: usize,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / n;
    let nn = T::lit(n as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); n];
    let mut dbeta = vec![T::zero(); n];
    for r in 0..rows {
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for j in 0..n {
            let i = r * n + j;
            dgamma[j] += dy[i] * xhat[i];
            dbeta[j] += dy[i];
            let dh = dy[i] * gamma[j];
            sum_dh += dh;
            sum_dh_h += dh * xhat[i];
        }
        for j in 0..n {
            let i = r * n + j;
            let dh = dy[i] * gamma[j];
            dx[i] = inv[r] / nn * (nn * dh - sum_dh - xhat[i] * sum_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

/// Max-subtracted softmax over rows of length `n`.
pub fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Mean over frequency rows and population standard deviation, per column:
/// `(b, f, t) -> (b, 2t)` laid out as `[means | stds]`.
pub(crate) fn mean_std_pool_forward<T: Real>(y: &[T], b: usize, f: usize, t: usize) -> Vec<T> {
    let ff = T::lit(f as f64);
    let mut out = vec![T::zero(); b * 2 * t];
    for s in 0..b {
        let base = &y[s * f * t..(s + 1) * f * t];
        for col in 0..t {
            let mean = (0..f).map(|r| base[r * t + col]).sum::<T>() / ff;
            let var = (0..f)
                .map(|r| {
                    let d = base[r * t + col] - mean;
                    d * d
                })
                .sum::<T>()
                / ff;
            out[s * 2 * t + col] = mean;
            out[s * 2 * t + t + col] = var.sqrt();
        }
    }
    out
}

pub(crate) fn mean_std_pool_backward<T: Real>(
    y: &[T],
    out: &[T],
    dout: &[T],
    b: usize,
    f: usize,
    t: usize,
) -> Vec<T> {
    let ff = T::lit(f as f64);
    let mut dy = vec![T::zero(); y.len()];
    for s in 0..b {
        for col in 0..t {
            let mean = out[s * 2 * t + col];
            let std = out[s * 2 * t + t + col];
            let dmean = dout[s * 2 * t + col];
            let dstd = dout[s * 2 * t + t + col];
            for r in 0..f {
                let i = s * f * t + r * t + col;
                let mut g = dmean / ff;
                // d std / d y = (y - mean) / (f * std); zero subgradient at std = 0
                if std > T::zero() {
                    g += dstd * (y[i] - mean) / (ff * std);
                }
                dy[i] = g;
            }
        }
    }
    dy
}

/// Mean cross-entropy of probability rows against one-hot targets, with
/// `ln` clamped at `floor`.
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, one_hot: &Tensor<T>, floor: T) -> Result<T> {
    if probs.shape() != one_hot.shape() || probs.ndim() != 2 {
        return Err(Error::Shape(format!(
            "cross_entropy: probs {:?} vs targets {:?}",
            probs.shape(),
            one_hot.shape()
        )));
    }
    let classes = probs.shape()[1];
    let labels = labels_from_one_hot(one_hot)?;
    let rows = labels.len();
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -probs.data()[r * classes + l].max(floor).ln())
        .sum();
    Ok(total / T::lit(rows as f64))
}

/// Recovers class indices from a `(b, c)` one-hot matrix.
pub fn labels_from_one_hot<T: Real>(one_hot: &Tensor<T>) -> Result<Vec<usize>> {
    if one_hot.ndim() != 2 {
        return Err(Error::Shape(format!("one-hot must be 2-d, got {:?}", one_hot.shape())));
    }
    let classes = one_hot.shape()[1];
    one_hot
        .data()
        .chunks(classes)
        .enumerate()
        .map(|(r, row)| {
            let ones: Vec<usize> = (0..classes).filter(|&j| row[j] == T::one()).collect();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones.len() == 1 && zeros == classes - 1 {
                Ok(ones[0])
            } else {
                Err(Error::Input(format!("row {r} is not one-hot")))
            }
        })
        .collect()
}

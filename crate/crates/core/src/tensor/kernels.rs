//! Forward and backward kernels over raw channel-first buffers.

use rayon::prelude::*;

use super::gemm::{gemm, MatRef};
use super::Real;
use crate::cloud::{Label, IGNORE};

pub const BN_EPSILON: f64 = 1e-5;

// channels are only split across threads when each carries enough work
const PAR_MIN_CHANNEL_WORK: usize = 1 << 12;

fn par_channels(channels: usize, per_channel: usize) -> bool {
    channels > 1 && channels * per_channel >= PAR_MIN_CHANNEL_WORK
}

// ---------------------------------------------------------------- conv1d

/// Grouped kernel-size-1 convolution: `x [cin, n]`, `w [cout, cin/groups]`.
pub(crate) fn conv1d_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    cin: usize,
    cout: usize,
    n: usize,
    groups: usize,
) -> Vec<T> {
    let (gi, go) = (cin / groups, cout / groups);
    let mut out = vec![T::zero(); cout * n];
    for g in 0..groups {
        gemm(
            MatRef::rows(&w[g * go * gi..(g + 1) * go * gi], go, gi),
            MatRef::rows(&x[g * gi * n..(g + 1) * gi * n], gi, n),
            &mut out[g * go * n..(g + 1) * go * n],
            false,
        );
    }
    add_row_bias(&mut out, b, n);
    out
}

pub(crate) fn add_row_bias<T: Real>(out: &mut [T], b: &[T], n: usize) {
    if n == 0 {
        return;
    }
    let body = |(row, bias): (&mut [T], &T)| row.iter_mut().for_each(|v| *v += *bias);
    if par_channels(b.len(), n) {
        out.par_chunks_mut(n).zip(b.par_iter()).for_each(body);
    } else {
        out.chunks_mut(n).zip(b.iter()).for_each(body);
    }
}

pub(crate) fn row_sums<T: Real>(m: &[T], n: usize) -> Vec<T> {
    if n == 0 {
        return vec![T::zero(); 0];
    }
    let rows = m.len() / n;
    if par_channels(rows, n) {
        m.par_chunks(n).map(|r| r.iter().copied().sum()).collect()
    } else {
        m.chunks(n).map(|r| r.iter().copied().sum()).collect()
    }
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    cin: usize,
    cout: usize,
    n: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (gi, go) = (cin / groups, cout / groups);
    let mut dx = vec![T::zero(); cin * n];
    let mut dw = vec![T::zero(); cout * gi];
    for g in 0..groups {
        let wg = &w[g * go * gi..(g + 1) * go * gi];
        let xg = &x[g * gi * n..(g + 1) * gi * n];
        let dyg = &dy[g * go * n..(g + 1) * go * n];
        // dx_g = w_gᵀ · dy_g
        gemm(
            MatRef::transposed(wg, go, gi),
            MatRef::rows(dyg, go, n),
            &mut dx[g * gi * n..(g + 1) * gi * n],
            false,
        );
        // dw_g = dy_g · x_gᵀ
        gemm(
            MatRef::rows(dyg, go, n),
            MatRef::transposed(xg, gi, n),
            &mut dw[g * go * gi..(g + 1) * go * gi],
            false,
        );
    }
    (dx, dw, row_sums(dy, n))
}

// ---------------------------------------------------------- depthwise 2d

fn shifted_range(len: usize, shift: isize) -> (usize, usize) {
    // output indices i with 0 <= i + shift < len
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Per-channel cross-correlation with zero padding `(k-1)/2`.
pub(crate) fn dwconv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], h: usize, wd: usize, k: usize) -> Vec<T> {
    let hw = h * wd;
    let c = b.len();
    let mut out = vec![T::zero(); c * hw];
    if hw == 0 {
        return out;
    }
    let p = (k / 2) as isize;
    let body = |(ch, oc): (usize, &mut [T])| {
        let xc = &x[ch * hw..(ch + 1) * hw];
        let wc = &w[ch * k * k..(ch + 1) * k * k];
        oc.fill(b[ch]);
        for di in 0..k {
            let si = di as isize - p;
            let (i0, i1) = shifted_range(h, si);
            for dj in 0..k {
                let sj = dj as isize - p;
                let (j0, j1) = shifted_range(wd, sj);
                let wv = wc[di * k + dj];
                if wv == T::zero() {
                    continue;
                }
                for i in i0..i1 {
                    let ii = (i as isize + si) as usize;
                    let orow = &mut oc[i * wd + j0..i * wd + j1];
                    let src = ((ii * wd + j0) as isize + sj) as usize;
                    let xrow = &xc[src..src + (j1 - j0)];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += wv * xv;
                    }
                }
            }
        }
    };
    if par_channels(c, hw * k * k) {
        out.par_chunks_mut(hw).enumerate().for_each(body);
    } else {
        out.chunks_mut(hw).enumerate().for_each(body);
    }
    out
}

/// Returns `(dx, dw, db)`.
pub(crate) fn dwconv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    c: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = h * wd;
    let mut dx = vec![T::zero(); c * hw];
    let mut dw = vec![T::zero(); c * k * k];
    let mut db = vec![T::zero(); c];
    if hw == 0 {
        return (dx, dw, db);
    }
    let p = (k / 2) as isize;
    let body = |(ch, ((dxc, dwc), dbc)): (usize, ((&mut [T], &mut [T]), &mut T))| {
        let xc = &x[ch * hw..(ch + 1) * hw];
        let wc = &w[ch * k * k..(ch + 1) * k * k];
        let dyc = &dy[ch * hw..(ch + 1) * hw];
        *dbc = dyc.iter().copied().sum();
        for di in 0..k {
            let si = di as isize - p;
            let (i0, i1) = shifted_range(h, si);
            for dj in 0..k {
                let sj = dj as isize - p;
                let (j0, j1) = shifted_range(wd, sj);
                let wv = wc[di * k + dj];
                let mut acc = T::zero();
                for i in i0..i1 {
                    let ii = (i as isize + si) as usize;
                    let grow = &dyc[i * wd + j0..i * wd + j1];
                    let src = ((ii * wd + j0) as isize + sj) as usize;
                    let xrow = &xc[src..src + (j1 - j0)];
                    let dxrow = &mut dxc[src..src + (j1 - j0)];
                    for ((g, &xv), dxv) in grow.iter().zip(xrow).zip(dxrow.iter_mut()) {
                        acc += *g * xv;
                        *dxv += wv * *g;
                    }
                }
                dwc[di * k + dj] = acc;
            }
        }
    };
    if par_channels(c, hw * k * k) {
        dx.par_chunks_mut(hw)
            .zip(dw.par_chunks_mut(k * k))
            .zip(db.par_iter_mut())
            .enumerate()
            .for_each(body);
    } else {
        dx.chunks_mut(hw)
            .zip(dw.chunks_mut(k * k))
            .zip(db.iter_mut())
            .enumerate()
            .for_each(body);
    }
    (dx, dw, db)
}

// ---------------------------------------------------------- batch norm

pub(crate) struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

fn channel_mean<T: Real>(row: &[T]) -> T {
    let m = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / m;
    // one refinement pass; exact for constant rows
    mean + row.iter().map(|&v| v - mean).sum::<T>() / m
}

/// Standardizes each row of `x [c, m]` with batch statistics.
pub(crate) fn batchnorm_train<T: Real>(x: &[T], gamma: &[T], beta: &[T], m: usize) -> BnForward<T> {
    let c = gamma.len();
    let eps = T::of(BN_EPSILON);
    let stats: Vec<(T, T)> = {
        let f = |row: &[T]| {
            let mean = channel_mean(row);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(m as f64);
            (mean, var)
        };
        if par_channels(c, m) {
            x.par_chunks(m).map(f).collect()
        } else {
            x.chunks(m).map(f).collect()
        }
    };
    let mean: Vec<T> = stats.iter().map(|s| s.0).collect();
    let var: Vec<T> = stats.iter().map(|s| s.1).collect();
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let (y, xhat) = normalize(x, gamma, beta, &mean, &inv_std, m);
    BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Standardizes with stored statistics.
pub(crate) fn batchnorm_eval<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    m: usize,
) -> BnForward<T> {
    let eps = T::of(BN_EPSILON);
    let inv_std: Vec<T> = running_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let (y, xhat) = normalize(x, gamma, beta, running_mean, &inv_std, m);
    BnForward {
        y,
        xhat,
        inv_std,
        mean: running_mean.to_vec(),
        var: running_var.to_vec(),
    }
}

fn normalize<T: Real>(x: &[T], gamma: &[T], beta: &[T], mean: &[T], inv_std: &[T], m: usize) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    if m == 0 {
        return (y, xhat);
    }
    let body = |(ch, (yr, hr)): (usize, (&mut [T], &mut [T]))| {
        let xr = &x[ch * m..(ch + 1) * m];
        for ((yv, hv), &xv) in yr.iter_mut().zip(hr.iter_mut()).zip(xr) {
            *hv = (xv - mean[ch]) * inv_std[ch];
            *yv = gamma[ch] * *hv + beta[ch];
        }
    };
    if par_channels(gamma.len(), m) {
        y.par_chunks_mut(m).zip(xhat.par_chunks_mut(m)).enumerate().for_each(body);
    } else {
        y.chunks_mut(m).zip(xhat.chunks_mut(m)).enumerate().for_each(body);
    }
    (y, xhat)
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the statistics are
/// functions of `x` and their gradient is included.
pub(crate) fn batchnorm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    gamma: &[T],
    inv_std: &[T],
    m: usize,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let mut dx = vec![T::zero(); c * m];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    if m == 0 {
        return (dx, dgamma, dbeta);
    }
    let mf = T::of(m as f64);
    let body = |(ch, ((dxr, dg), dbt)): (usize, ((&mut [T], &mut T), &mut T))| {
        let dyr = &dy[ch * m..(ch + 1) * m];
        let hr = &xhat[ch * m..(ch + 1) * m];
        let sum_dy: T = dyr.iter().copied().sum();
        let sum_dy_h: T = dyr.iter().zip(hr).map(|(&g, &h)| g * h).sum();
        *dg = sum_dy_h;
        *dbt = sum_dy;
        let scale = gamma[ch] * inv_std[ch];
        if batch_stats {
            for ((d, &g), &h) in dxr.iter_mut().zip(dyr).zip(hr) {
                *d = scale * (g - sum_dy / mf - h * sum_dy_h / mf);
            }
        } else {
            for (d, &g) in dxr.iter_mut().zip(dyr) {
                *d = scale * g;
            }
        }
    };
    if par_channels(c, m) {
        dx.par_chunks_mut(m)
            .zip(dgamma.par_iter_mut())
            .zip(dbeta.par_iter_mut())
            .enumerate()
            .for_each(body);
    } else {
        dx.chunks_mut(m)
            .zip(dgamma.iter_mut())
            .zip(dbeta.iter_mut())
            .enumerate()
            .for_each(body);
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------- activations

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(v: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(v: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = (c * (v + a * v * v * v)).tanh();
    let dt = (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * v * v);
    half * (T::one() + t) + half * v * dt
}

// ---------------------------------------------------------- max pooling

/// Maximum over `axis`, returning values and the flat input index of each
/// maximum (the first one on ties).
pub(crate) fn max_over_axis<T: Real>(x: &[T], shape: &[usize], axis: usize) -> (Vec<T>, Vec<usize>) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut vals = vec![T::zero(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    if inner == 0 || len == 0 {
        return (vals, arg);
    }
    let body = |(o, (vr, ar)): (usize, (&mut [T], &mut [usize]))| {
        let base = o * len * inner;
        vr.copy_from_slice(&x[base..base + inner]);
        for (l, a) in ar.iter_mut().enumerate() {
            *a = base + l;
        }
        for t in 1..len {
            let off = base + t * inner;
            for l in 0..inner {
                let v = x[off + l];
                if v > vr[l] {
                    vr[l] = v;
                    ar[l] = off + l;
                }
            }
        }
    };
    if par_channels(outer, len * inner) {
        vals.par_chunks_mut(inner)
            .zip(arg.par_chunks_mut(inner))
            .enumerate()
            .for_each(body);
    } else {
        vals.chunks_mut(inner).zip(arg.chunks_mut(inner)).enumerate().for_each(body);
    }
    (vals, arg)
}

// ---------------------------------------------------------- softmax / loss

/// Column-wise softmax of `logits [c, n]` (classes along rows).
pub fn softmax_columns<T: Real>(logits: &[T], c: usize, n: usize) -> Vec<T> {
    let mut max = vec![T::neg_infinity(); n];
    for row in logits.chunks(n).take(c) {
        for (m, &v) in max.iter_mut().zip(row) {
            *m = m.max(v);
        }
    }
    let mut out: Vec<T> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - max[i % n]).exp())
        .collect();
    let mut sum = vec![T::zero(); n];
    for row in out.chunks(n) {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    for row in out.chunks_mut(n) {
        for (v, &s) in row.iter_mut().zip(&sum) {
            *v = *v / s;
        }
    }
    out
}

/// Mean cross-entropy over points whose target is not [`IGNORE`].
/// Returns `(loss, probabilities, counted points)`.
pub(crate) fn softmax_xent<T: Real>(logits: &[T], targets: &[Label], c: usize, n: usize) -> (T, Vec<T>, usize) {
    let probs = softmax_columns(logits, c, n);
    let mut loss = 0.0f64;
    let mut count = 0usize;
    for (pt, &t) in targets.iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        // -log p computed from the stabilized logits, not from probs
        let mut max = f64::NEG_INFINITY;
        for cls in 0..c {
            max = max.max(logits[cls * n + pt].as_f64());
        }
        let mut s = 0.0f64;
        for cls in 0..c {
            s += (logits[cls * n + pt].as_f64() - max).exp();
        }
        loss += max + s.ln() - logits[t as usize * n + pt].as_f64();
        count += 1;
    }
    let mean = if count == 0 { f64::NAN } else { loss / count as f64 };
    (T::of(mean), probs, count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifted_ranges() {
        assert_eq!(shifted_range(5, 0), (0, 5));
        assert_eq!(shifted_range(5, -1), (1, 5));
        assert_eq!(shifted_range(5, 1), (0, 4));
        assert_eq!(shifted_range(1, 2), (0, 0));
        assert_eq!(shifted_range(2, -3), (2, 2));
    }

    #[test]
    fn max_first_index_on_ties() {
        // shape [3, 2]: reduce axis 0
        let x = [1.0, 5.0, 1.0, 5.0, 0.0, 5.0];
        let (v, a) = max_over_axis(&x, &[3, 2], 0);
        assert_eq!(v, vec![1.0, 5.0]);
        assert_eq!(a, vec![0, 1]);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let l = [1.0, -2.0, 0.5, 3.0, 1000.0, -1000.0];
        let p = softmax_columns(&l, 2, 3);
        for n in 0..3 {
            assert!((p[n] + p[3 + n] - 1.0f64).abs() < 1e-12);
        }
    }
}

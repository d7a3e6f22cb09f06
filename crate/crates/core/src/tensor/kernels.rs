//! Slice-level forward and backward loops for the tape primitives.
//!
//! Every function here works on raw row-major buffers; shape checking happens
//! one level up in the tape.

use super::Scalar;

/// Convolution boundary handling along the sequence axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output at `t` sees inputs `t - w + 1 ..= t`.
    Causal,
    /// Output at `t` sees inputs `t - (w-1)/2 ..= t + (w-1)/2`; `w` must be odd.
    Symmetric,
}

impl Padding {
    pub fn offset(self, width: usize) -> usize {
        match self {
            Padding::Causal => width - 1,
            Padding::Symmetric => (width - 1) / 2,
        }
    }
}

#[inline]
fn source(t: usize, j: usize, off: usize, len: usize) -> Option<usize> {
    let s = t + j;
    if s < off || s - off >= len {
        None
    } else {
        Some(s - off)
    }
}

// ---------------------------------------------------------------- matmul

/// `a [rows×k] · b` where `b` is `[k×n]`, or `[n×k]` when `transpose_b`.
pub fn matmul<T: Scalar>(a: &[T], rows: usize, k: usize, b: &[T], n: usize, transpose_b: bool) -> Vec<T> {
    let mut out = vec![T::zero(); rows * n];
    let bs = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(rows, k, n, a, (k as isize, 1), b, bs, T::zero(), &mut out);
    out
}

/// Gradient w.r.t. `a`: `g · bᵀ` (or `g · b` when `transpose_b`).
pub fn matmul_grad_a<T: Scalar>(g: &[T], rows: usize, k: usize, b: &[T], n: usize, transpose_b: bool) -> Vec<T> {
    let mut out = vec![T::zero(); rows * k];
    let bs = if transpose_b { (k as isize, 1) } else { (1, n as isize) };
    T::gemm(rows, n, k, g, (n as isize, 1), b, bs, T::zero(), &mut out);
    out
}

/// Gradient w.r.t. `b`: `aᵀ · g` (or `gᵀ · a` when `transpose_b`).
pub fn matmul_grad_b<T: Scalar>(a: &[T], rows: usize, k: usize, g: &[T], n: usize, transpose_b: bool) -> Vec<T> {
    if transpose_b {
        let mut out = vec![T::zero(); n * k];
        T::gemm(n, rows, k, g, (1, n as isize), a, (k as isize, 1), T::zero(), &mut out);
        out
    } else {
        let mut out = vec![T::zero(); k * n];
        T::gemm(k, rows, n, a, (1, k as isize), g, (n as isize, 1), T::zero(), &mut out);
        out
    }
}

// --------------------------------------------------------------- softmax

pub fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(x[at(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                y[at(j)] /= s;
            }
        }
    }
    y
}

pub fn softmax_grad<T: Scalar>(y: &[T], g: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    dx
}

// ------------------------------------------------------------ layer norm

/// Returns `(y, mean, rstd)` per row of width `c`.
pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], c: usize, eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let cf = T::of(c as f64);
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let rstd = T::one() / (var + T::of(eps)).sqrt();
        for j in 0..c {
            y[r * c + j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_grad<T: Scalar>(
    x: &[T],
    gain: &[T],
    mean: &[T],
    rstd: &[T],
    g: &[T],
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    let cf = T::of(c as f64);
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for r in 0..rows {
        for j in 0..c {
            xhat[j] = (x[r * c + j] - mean[r]) * rstd[r];
            let gj = g[r * c + j];
            dxhat[j] = gj * gain[j];
            dgain[j] += gj * xhat[j];
            dbias[j] += gj;
        }
        let m1 = dxhat.iter().copied().sum::<T>() / cf;
        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / cf;
        for j in 0..c {
            dx[r * c + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (dx, dgain, dbias)
}

// ------------------------------------------------------ depthwise conv1d

/// `x [batch×len×c]`, `w [width×c]`.
pub fn conv1d<T: Scalar>(x: &[T], w: &[T], batch: usize, len: usize, c: usize, width: usize, pad: Padding) -> Vec<T> {
    let off = pad.offset(width);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for t in 0..len {
            let o = &mut out[(b * len + t) * c..(b * len + t + 1) * c];
            for j in 0..width {
                let Some(s) = source(t, j, off, len) else { continue };
                let xs = &x[(b * len + s) * c..(b * len + s + 1) * c];
                let wj = &w[j * c..(j + 1) * c];
                for ch in 0..c {
                    o[ch] += wj[ch] * xs[ch];
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw)`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_grad<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    batch: usize,
    len: usize,
    c: usize,
    width: usize,
    pad: Padding,
) -> (Vec<T>, Vec<T>) {
    let off = pad.offset(width);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for b in 0..batch {
        for t in 0..len {
            let gt = &g[(b * len + t) * c..(b * len + t + 1) * c];
            for j in 0..width {
                let Some(s) = source(t, j, off, len) else { continue };
                let base = (b * len + s) * c;
                for ch in 0..c {
                    dx[base + ch] += w[j * c + ch] * gt[ch];
                    dw[j * c + ch] += x[base + ch] * gt[ch];
                }
            }
        }
    }
    (dx, dw)
}

// ----------------------------------------------------- dynamic conv1d

/// `x [batch×len×c]`, `kernels [batch×len×groups×width]` with channels tied
/// in contiguous groups of `c / groups`.
#[allow(clippy::too_many_arguments)]
pub fn dyn_conv<T: Scalar>(
    x: &[T],
    kernels: &[T],
    batch: usize,
    len: usize,
    c: usize,
    groups: usize,
    width: usize,
    pad: Padding,
) -> Vec<T> {
    let off = pad.offset(width);
    let gs = c / groups;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for t in 0..len {
            let kt = &kernels[(b * len + t) * groups * width..(b * len + t + 1) * groups * width];
            let o = &mut out[(b * len + t) * c..(b * len + t + 1) * c];
            for j in 0..width {
                let Some(s) = source(t, j, off, len) else { continue };
                let xs = &x[(b * len + s) * c..(b * len + s + 1) * c];
                for grp in 0..groups {
                    let kv = kt[grp * width + j];
                    for ch in grp * gs..(grp + 1) * gs {
                        o[ch] += kv * xs[ch];
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dkernels)`.
#[allow(clippy::too_many_arguments)]
pub fn dyn_conv_grad<T: Scalar>(
    x: &[T],
    kernels: &[T],
    g: &[T],
    batch: usize,
    len: usize,
    c: usize,
    groups: usize,
    width: usize,
    pad: Padding,
) -> (Vec<T>, Vec<T>) {
    let off = pad.offset(width);
    let gs = c / groups;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernels.len()];
    for b in 0..batch {
        for t in 0..len {
            let kbase = (b * len + t) * groups * width;
            let gt = &g[(b * len + t) * c..(b * len + t + 1) * c];
            for j in 0..width {
                let Some(s) = source(t, j, off, len) else { continue };
                let base = (b * len + s) * c;
                for grp in 0..groups {
                    let kv = kernels[kbase + grp * width + j];
                    let mut acc = T::zero();
                    for ch in grp * gs..(grp + 1) * gs {
                        dx[base + ch] += kv * gt[ch];
                        acc += x[base + ch] * gt[ch];
                    }
                    dk[kbase + grp * width + j] += acc;
                }
            }
        }
    }
    (dx, dk)
}

// -------------------------------------------------------------- attention

#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub c: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    fn masked(&self, causal: bool, mask: Option<&[bool]>, b: usize, i: usize, j: usize) -> bool {
        if causal && j > i + (self.lk - self.lq) {
            return true;
        }
        matches!(mask, Some(m) if !m[b * self.lk + j])
    }
}

/// Multi-head scaled dot-product attention. Returns `(out, probs)` where
/// `probs` is `[batch×heads×lq×lk]`.
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
    causal: bool,
    mask: Option<&[bool]>,
) -> (Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        lq,
        lk,
        c,
        heads,
    } = dims;
    let hd = dims.head_dim();
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut out = vec![T::zero(); batch * lq * c];
    let mut probs = vec![T::zero(); batch * heads * lq * lk];
    let mut row = vec![T::zero(); lk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..lq {
                let qi = &q[(b * lq + i) * c + h * hd..(b * lq + i) * c + (h + 1) * hd];
                let mut m = T::neg_infinity();
                for (j, r) in row.iter_mut().enumerate() {
                    if dims.masked(causal, mask, b, i, j) {
                        *r = T::neg_infinity();
                        continue;
                    }
                    let kj = &k[(b * lk + j) * c + h * hd..(b * lk + j) * c + (h + 1) * hd];
                    let s = qi.iter().zip(kj).map(|(&a, &bb)| a * bb).sum::<T>() * scale;
                    *r = s;
                    m = m.max(s);
                }
                let p = &mut probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                if m == T::neg_infinity() {
                    // fully masked row attends to nothing
                    continue;
                }
                let mut sum = T::zero();
                for j in 0..lk {
                    let e = if row[j] == T::neg_infinity() {
                        T::zero()
                    } else {
                        (row[j] - m).exp()
                    };
                    p[j] = e;
                    sum += e;
                }
                for pj in p.iter_mut() {
                    *pj /= sum;
                }
                let o = &mut out[(b * lq + i) * c + h * hd..(b * lq + i) * c + (h + 1) * hd];
                for j in 0..lk {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let vj = &v[(b * lk + j) * c + h * hd..(b * lk + j) * c + (h + 1) * hd];
                    for d in 0..hd {
                        o[d] += p[j] * vj[d];
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_grad<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        lq,
        lk,
        c,
        heads,
    } = dims;
    let hd = dims.head_dim();
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); lk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..lq {
                let p = &probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                let go = (b * lq + i) * c + h * hd;
                let gi = &g[go..go + hd];
                let mut dot = T::zero();
                for j in 0..lk {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vo = (b * lk + j) * c + h * hd;
                    dp[j] = gi.iter().zip(&v[vo..vo + hd]).map(|(&a, &bb)| a * bb).sum();
                    dot += p[j] * dp[j];
                    for d in 0..hd {
                        dv[vo + d] += p[j] * gi[d];
                    }
                }
                for j in 0..lk {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let ko = (b * lk + j) * c + h * hd;
                    for d in 0..hd {
                        dq[go + d] += ds * k[ko + d];
                        dk[ko + d] += ds * q[go + d];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------- cross entropy

/// Label-smoothed cross-entropy summed over non-ignored rows, divided by
/// their count. Returns `(loss, count)`.
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    ignore: Option<usize>,
    smoothing: f64,
) -> (T, usize) {
    let mut total = 0.0f64;
    let mut count = 0usize;
    let eps = smoothing;
    for (r, &y) in targets.iter().enumerate() {
        if Some(y) == ignore {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
        let nll = (lse - row[y]).as_f64();
        let smooth = row.iter().map(|&z| (lse - z).as_f64()).sum::<f64>() / vocab as f64;
        total += (1.0 - eps) * nll + eps * smooth;
        count += 1;
    }
    if count == 0 {
        (T::zero(), 0)
    } else {
        (T::of(total / count as f64), count)
    }
}

pub fn cross_entropy_grad<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    ignore: Option<usize>,
    smoothing: f64,
    count: usize,
    upstream: T,
) -> Vec<T> {
    let mut d = vec![T::zero(); logits.len()];
    if count == 0 {
        return d;
    }
    let scale = upstream / T::of(count as f64);
    let off = T::of(smoothing / vocab as f64);
    let hit = T::of(1.0 - smoothing);
    for (r, &y) in targets.iter().enumerate() {
        if Some(y) == ignore {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let s: T = row.iter().map(|&z| (z - m).exp()).sum();
        let dr = &mut d[r * vocab..(r + 1) * vocab];
        for v in 0..vocab {
            let p = (row[v] - m).exp() / s;
            let mut q = off;
            if v == y {
                q += hit;
            }
            dr[v] = (p - q) * scale;
        }
    }
    d
}

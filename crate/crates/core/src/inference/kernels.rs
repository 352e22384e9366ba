//! Dense CPU kernels. Every reduction runs in a fixed order so results are
//! reproducible bit for bit across runs and weight backends.

use crate::scalar::{cst, Scalar};

/// Dot product with eight interleaved accumulators combined pairwise.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] = acc[k] + xa[k] * xb[k];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// `out[r, o] = x[r, :] . w[o, :]` for `x` of shape `rows x inner` and a
/// row-major weight `w` of shape `outer x inner`.
pub fn matmul_t<T: Scalar>(x: &[T], w: &[T], rows: usize, inner: usize, outer: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(w.len(), outer * inner);
    let mut out = vec![T::zero(); rows * outer];
    for (xr, or) in x.chunks_exact(inner).zip(out.chunks_exact_mut(outer)) {
        for (o, wr) in or.iter_mut().zip(w.chunks_exact(inner)) {
            *o = dot(xr, wr);
        }
    }
    out
}

/// Row-wise RMS normalization: `x / sqrt(mean(x^2) + eps) * weight`.
pub fn rms_norm<T: Scalar>(x: &[T], weight: &[T], eps: T) -> Vec<T> {
    let d = weight.len();
    let n = cst::<T>(d as f64);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let ss = dot(row, row) / n;
        let inv = T::one() / (ss + eps).sqrt();
        out.extend(row.iter().zip(weight).map(|(&v, &w)| v * inv * w));
    }
    out
}

/// In-place softmax.
pub fn softmax<T: Scalar>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// `log softmax(x)[i]`.
pub fn log_softmax_at<T: Scalar>(x: &[T], i: usize) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = x.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
    x[i] - max - sum.ln()
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Rotary embedding tables: `cos[p, i]`, `sin[p, i]` for position `p` and
/// pair `i` with frequency `base^(-2i / head_dim)`.
pub struct Rope<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> Rope<T> {
    pub fn new(positions: usize, head_dim: usize, base: T) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for p in 0..positions {
            for i in 0..half {
                let freq = base.powf(-cst::<T>((2 * i) as f64) / cst(head_dim as f64));
                let angle = cst::<T>(p as f64) * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates consecutive pairs `(v[2i], v[2i+1])` of one head vector.
    pub fn apply(&self, v: &mut [T], pos: usize) {
        let base = pos * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (x0, x1) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = x0 * c - x1 * s;
            v[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

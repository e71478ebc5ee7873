//! Elementwise and row kernels shared by the forward pass and the trainer.

use crate::config::ROPE_BASE;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Numerically stable softmax of a score vector.
pub fn softmax_row<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax with max subtraction; input must be finite and non-empty.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Root-mean-square of a row, including the stabilizing epsilon.
pub fn rms<T: Scalar>(row: &[T], eps: T) -> T {
    let n = T::from_usize(row.len()).expect("row length fits");
    let ss: T = row.iter().map(|&x| x * x).sum();
    (ss / n + eps).sqrt()
}

/// `out = x / rms(x) * gain` per row. Returns the per-row RMS scales.
pub fn rms_norm_rows<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> Vec<T> {
    let d = gain.len();
    let rows = x.len() / d;
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let s = rms(row, eps);
        scales.push(s);
        normalize_with_scale(row, gain, s, &mut out[r * d..(r + 1) * d]);
    }
    scales
}

/// `out = x / scale * gain`.
#[inline]
pub fn normalize_with_scale<T: Scalar>(x: &[T], gain: &[T], scale: T, out: &mut [T]) {
    let inv = T::one() / scale;
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = xi * inv * g;
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// d/dx silu(x).
#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Rotary position tables: `cos[p][i]`, `sin[p][i]` for pair `i` of a head.
#[derive(Debug, Clone)]
pub struct Rope<T> {
    d_head: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> Rope<T> {
    pub fn new(d_head: usize, max_seq: usize) -> Self {
        let pairs = d_head / 2;
        let mut cos = Vec::with_capacity(max_seq * pairs);
        let mut sin = Vec::with_capacity(max_seq * pairs);
        for p in 0..max_seq {
            for i in 0..pairs {
                let freq = ROPE_BASE.powf(-(2.0 * i as f64) / d_head as f64);
                let angle = p as f64 * freq;
                cos.push(T::from_f64_lossy(angle.cos()));
                sin.push(T::from_f64_lossy(angle.sin()));
            }
        }
        Self { d_head, cos, sin }
    }

    /// Rotate every head of every row in place. `x` is `[seq, n_heads * d_head]`.
    /// An odd trailing head dimension is left unrotated.
    pub fn apply(&self, x: &mut [T], seq: usize, n_heads: usize) {
        self.rotate(x, seq, n_heads, false);
    }

    /// Inverse rotation (the transpose), used for gradients.
    pub fn apply_inverse(&self, x: &mut [T], seq: usize, n_heads: usize) {
        self.rotate(x, seq, n_heads, true);
    }

    fn rotate(&self, x: &mut [T], seq: usize, n_heads: usize, inverse: bool) {
        let pairs = self.d_head / 2;
        let width = n_heads * self.d_head;
        for p in 0..seq {
            let cs = &self.cos[p * pairs..(p + 1) * pairs];
            let sn = &self.sin[p * pairs..(p + 1) * pairs];
            let row = &mut x[p * width..(p + 1) * width];
            for h in 0..n_heads {
                let head = &mut row[h * self.d_head..(h + 1) * self.d_head];
                for i in 0..pairs {
                    let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                    let a = head[2 * i];
                    let b = head[2 * i + 1];
                    head[2 * i] = a * c - b * s;
                    head[2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}

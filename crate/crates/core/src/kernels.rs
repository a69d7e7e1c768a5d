// Slice-level kernels shared by the taped forward pass and the cached
// incremental decoder. Reduction orders are fixed so both paths agree.

use alloc::vec;
use alloc::vec::Vec;

use crate::Real;

/// `out[m×p] = a[m×k] · b[k×p]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    out
}

/// `out[k] = x[k] · b[k×p]` accumulated into a single row.
pub(crate) fn vecmat<T: Real>(x: &[T], b: &[T], k: usize, p: usize) -> Vec<T> {
    matmul(x, b, 1, k, p)
}

/// `da[m×k] += dc[m×p] · b[k×p]ᵀ`.
pub(crate) fn acc_grad_a<T: Real>(da: &mut [T], dc: &[T], b: &[T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let dci = &dc[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            let mut s = T::zero();
            for (&x, &y) in dci.iter().zip(brow) {
                s = s + x * y;
            }
            da[i * k + kk] = da[i * k + kk] + s;
        }
    }
}

/// `db[k×p] += a[m×k]ᵀ · dc[m×p]`.
pub(crate) fn acc_grad_b<T: Real>(db: &mut [T], a: &[T], dc: &[T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let dci = &dc[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let row = &mut db[kk * p..(kk + 1) * p];
            for (o, &g) in row.iter_mut().zip(dci) {
                *o = *o + aik * g;
            }
        }
    }
}

/// Stable log-softmax of one row. Entries with `allowed[j] == false` are
/// excluded from the normaliser and set to `T::min_value()`.
pub(crate) fn log_softmax_row<T: Real>(x: &[T], allowed: Option<&[bool]>, out: &mut [T]) {
    let ok = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, &v) in x.iter().enumerate() {
        if ok(j) {
            sum = sum + (v - max).exp();
        }
    }
    let lse = max + sum.ln();
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = if ok(j) { v - lse } else { T::min_value() };
    }
}

/// Layer norm of one row; returns `(mean, 1/std)` for the backward pass.
pub(crate) fn layer_norm_row<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
) -> (T, T) {
    let d = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    let rstd = T::one() / (var + eps).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * rstd * g + b;
    }
    (mean, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let u = c * (x + a * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Which keys each query may attend to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttnMask {
    /// Query `i` sees keys `j <= i + offset` only.
    pub causal: bool,
    /// Position of query row 0 within the key sequence (causal case).
    pub offset: usize,
    /// Per-key validity (false for PAD).
    pub key_valid: Option<Vec<bool>>,
}

impl AttnMask {
    #[inline]
    pub(crate) fn allows(&self, i: usize, j: usize) -> bool {
        (!self.causal || j <= i + self.offset) && self.key_valid.as_ref().is_none_or(|v| v[j])
    }
}

/// Multi-head scaled dot-product attention over row-major `q[m×d]`,
/// `k[n×d]`, `v[n×d]`. Returns the output `[m×d]` and the attention
/// probabilities `[heads×m×n]`. Rows with no visible key produce zeros.
pub(crate) fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    m: usize,
    n: usize,
    d: usize,
    heads: usize,
    mask: &AttnMask,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); m * d];
    let mut probs = vec![T::zero(); heads * m * n];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..m {
            let p = &mut probs[(h * m + i) * n..(h * m + i + 1) * n];
            let qi = &q[i * d + c0..i * d + c0 + dh];
            let mut max = T::neg_infinity();
            for j in 0..n {
                if mask.allows(i, j) {
                    let kj = &k[j * d + c0..j * d + c0 + dh];
                    let mut s = T::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        s = s + a * b;
                    }
                    let s = s * scale;
                    p[j] = s;
                    if s > max {
                        max = s;
                    }
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for j in 0..n {
                if mask.allows(i, j) {
                    let e = (p[j] - max).exp();
                    p[j] = e;
                    sum = sum + e;
                } else {
                    p[j] = T::zero();
                }
            }
            let o = &mut out[i * d + c0..i * d + c0 + dh];
            for j in 0..n {
                p[j] = p[j] / sum;
                let pj = p[j];
                if pj == T::zero() {
                    continue;
                }
                let vj = &v[j * d + c0..j * d + c0 + dh];
                for (oo, &vv) in o.iter_mut().zip(vj) {
                    *oo = *oo + pj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    m: usize,
    n: usize,
    d: usize,
    heads: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..m {
            let p = &probs[(h * m + i) * n..(h * m + i + 1) * n];
            let doi = &dout[i * d + c0..i * d + c0 + dh];
            let mut dot = T::zero();
            for j in 0..n {
                let vj = &v[j * d + c0..j * d + c0 + dh];
                let mut s = T::zero();
                for (&a, &b) in doi.iter().zip(vj) {
                    s = s + a * b;
                }
                dp[j] = s;
                dot = dot + s * p[j];
                if p[j] != T::zero() {
                    let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                    for (g, &a) in dvj.iter_mut().zip(doi) {
                        *g = *g + p[j] * a;
                    }
                }
            }
            for j in 0..n {
                if p[j] == T::zero() {
                    continue;
                }
                let ds = p[j] * (dp[j] - dot) * scale;
                for c in 0..dh {
                    dq[i * d + c0 + c] = dq[i * d + c0 + c] + ds * k[j * d + c0 + c];
                    dk[j * d + c0 + c] = dk[j * d + c0 + c] + ds * q[i * d + c0 + c];
                }
            }
        }
    }
}

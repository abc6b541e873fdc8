//! Pure forward kernels shared by the autograd tape and the incremental
//! decoder.
//!
//! Every kernel iterates in a fixed ascending order and the matrix-level
//! entry points delegate to the row-level ones. Computing one row in
//! isolation therefore produces exactly the same bits as computing the full
//! matrix and slicing, which is what makes cached decoding reproducible.

use crate::scalar::Scalar;

/// Dot product, accumulated left to right.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `out = a_row * b` for a `k`-vector against a `k x n` matrix.
pub fn matmul_row<S: Scalar>(a_row: &[S], b: &[S], n: usize, out: &mut [S]) {
    debug_assert_eq!(out.len(), n);
    debug_assert_eq!(a_row.len() * n, b.len());
    out.fill(S::zero());
    for (p, &a) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += a * bv;
        }
    }
}

/// `(m x k) * (k x n)` row-major matrix product.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        matmul_row(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
    }
    out
}

/// `(m x k) * (n x k)^T`, i.e. pairwise row dot products.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `(m x k)^T * (m x n)`, used by matmul backward passes.
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Gaussian error linear unit in its exact form `x * Phi(x)`.
pub fn gelu<S: Scalar>(x: S) -> S {
    x * normal_cdf(x)
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)`.
pub fn gelu_derivative<S: Scalar>(x: S) -> S {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf<S: Scalar>(x: S) -> S {
    let half = S::of_f64(0.5);
    let inv_sqrt2 = S::of_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (S::one() + (x * inv_sqrt2).erf())
}

/// Standard normal probability density function.
pub fn normal_pdf<S: Scalar>(x: S) -> S {
    let inv_sqrt_2pi = S::of_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    inv_sqrt_2pi * (-(x * x) * S::of_f64(0.5)).exp()
}

/// Numerically stable softmax over one lane, with optional blocking.
///
/// Blocked entries come out exactly `0`; the maximum is taken over the
/// visible entries only. At least one entry must be visible. Non-finite
/// inputs are not an error here: they poison the lane with NaN so the
/// caller's loss check can see them.
pub fn softmax_row_masked<S: Scalar>(xs: &[S], blocked: Option<&[bool]>, out: &mut [S]) {
    debug_assert_eq!(xs.len(), out.len());
    let visible = |j: usize| blocked.map_or(true, |b| !b[j]);
    let mut any_visible = false;
    let mut max = S::neg_infinity();
    for (j, &x) in xs.iter().enumerate() {
        if visible(j) {
            any_visible = true;
            if x > max {
                max = x;
            }
        }
    }
    debug_assert!(any_visible, "softmax lane fully blocked");
    let mut sum = S::zero();
    for (j, &x) in xs.iter().enumerate() {
        if visible(j) {
            let e = (x - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = S::zero();
        }
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Softmax over one lane.
pub fn softmax_row<S: Scalar>(xs: &[S], out: &mut [S]) {
    softmax_row_masked(xs, None, out);
}

/// Log-softmax over one lane, stable via max subtraction.
pub fn log_softmax_row<S: Scalar>(xs: &[S], out: &mut [S]) {
    debug_assert_eq!(xs.len(), out.len());
    let mut max = S::neg_infinity();
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for &x in xs {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = x - lse;
    }
}

/// Layer normalization of one lane with learned gain and bias.
pub fn layer_norm_row<S: Scalar>(xs: &[S], gain: &[S], bias: &[S], eps: S, out: &mut [S]) {
    let n = xs.len();
    debug_assert_eq!(gain.len(), n);
    debug_assert_eq!(bias.len(), n);
    debug_assert_eq!(out.len(), n);
    let inv_n = S::one() / S::of_f64(n as f64);
    let mut mean = S::zero();
    for &x in xs {
        mean += x;
    }
    mean = mean * inv_n;
    let mut var = S::zero();
    for &x in xs {
        let d = x - mean;
        var += d * d;
    }
    var = var * inv_n;
    let inv_std = S::one() / (var + eps).sqrt();
    for j in 0..n {
        out[j] = gain[j] * ((xs[j] - mean) * inv_std) + bias[j];
    }
}

/// Mean and reciprocal standard deviation of a lane, as used by
/// [`layer_norm_row`]. Exposed for the backward pass.
pub fn layer_norm_stats<S: Scalar>(xs: &[S], eps: S) -> (S, S) {
    let inv_n = S::one() / S::of_f64(xs.len() as f64);
    let mut mean = S::zero();
    for &x in xs {
        mean += x;
    }
    mean = mean * inv_n;
    let mut var = S::zero();
    for &x in xs {
        let d = x - mean;
        var += d * d;
    }
    var = var * inv_n;
    (mean, S::one() / (var + eps).sqrt())
}

/// Element-wise sum of three equal-length rows.
pub fn sum3_row<S: Scalar>(a: &[S], b: &[S], c: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), c.len());
    debug_assert_eq!(a.len(), out.len());
    for j in 0..a.len() {
        out[j] = a[j] + b[j] + c[j];
    }
}

/// Iterates the lanes of `shape` along `axis`, yielding for each lane the
/// flat indices of its elements in order.
pub fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut idx = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (t, slot) in idx.iter_mut().enumerate() {
                *slot = o * len * inner + t * inner + i;
            }
            f(&idx);
        }
    }
}

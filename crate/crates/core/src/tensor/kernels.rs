//! Dense numeric kernels shared by the tensor forward and backward passes.
//!
//! All reductions run in a fixed order (the contraction index advances
//! monotonically), so every kernel is bit-deterministic for a given build.
//! The matmul family is written saxpy-style — the innermost loop walks
//! contiguous rows of the right operand and the output — which the compiler
//! auto-vectorizes without losing that ordering.

use super::Scalar;

/// `out = a @ b` with `a: (m,k)`, `b: (k,n)`, `out: (m,n)`.
pub fn matmul_nn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for row in out.iter_mut() {
        *row = E::zero();
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c = *c + a_ik * bv;
            }
        }
    }
}

/// `out = a @ bᵀ` with `a: (m,k)`, `b: (n,k)`, `out: (m,n)`.
///
/// Implemented as a transpose followed by [`matmul_nn`] so the contraction
/// order (and therefore the rounding) matches the other kernels.
pub fn matmul_nt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    matmul_nn(a, &bt, m, k, n, out);
}

/// `out = aᵀ @ b` with `a: (m,k)`, `b: (m,n)`, `out: (k,n)`.
pub fn matmul_tn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for row in out.iter_mut() {
        *row = E::zero();
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let c_row = &mut out[kk * n..(kk + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c = *c + a_ik * bv;
            }
        }
    }
}

/// Transposes a row-major `(rows, cols)` matrix into `(cols, rows)`.
pub fn transpose<E: Scalar>(src: &[E], rows: usize, cols: usize) -> Vec<E> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// GELU activation, tanh approximation.
pub fn gelu<E: Scalar>(x: E) -> E {
    let x = x.to_f64_lossy();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    E::from_f64_lossy(0.5 * x * (1.0 + u.tanh()))
}

/// Derivative of [`gelu`] with respect to its input.
pub fn gelu_grad<E: Scalar>(x: E) -> E {
    let x = x.to_f64_lossy();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    E::from_f64_lossy(0.5 * (1.0 + t) + 0.5 * x * sech2 * du)
}

/// Row-wise softmax over a `(rows, cols)` view. Max-subtracted for stability.
pub fn softmax_rows<E: Scalar>(x: &[E], rows: usize, cols: usize, out: &mut [E]) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            if v > max {
                max = v;
            }
        }
        let mut sum = E::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = E::one() / sum;
        for o in out_row.iter_mut() {
            *o = *o * inv;
        }
    }
}

/// Per-row mean and reciprocal standard deviation for layer normalization.
/// Variance is the population variance; `eps` sits inside the square root.
pub fn row_moments<E: Scalar>(row: &[E], eps: f64) -> (E, E) {
    let n = E::from_f64_lossy(row.len() as f64);
    let mut sum = E::zero();
    for &v in row {
        sum = sum + v;
    }
    let mean = sum / n;
    let mut var_sum = E::zero();
    for &v in row {
        let d = v - mean;
        var_sum = var_sum + d * d;
    }
    let var = var_sum / n;
    let rstd = E::one() / (var + E::from_f64_lossy(eps)).sqrt();
    (mean, rstd)
}

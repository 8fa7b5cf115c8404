//! Raw dense kernels over row-major slices.
//!
//! Output rows are distributed across the rayon pool in fixed blocks; each
//! block is reduced by a single thread in a fixed order, so results do not
//! depend on the number of threads.

use rayon::prelude::*;

/// Rows below this count run on the calling thread.
const PAR_MIN_ROWS: usize = 16;

/// Output rows per parallel GEMM task. Fixed so the partition, and with it
/// every floating-point result, is independent of the pool size.
const GEMM_ROW_BLOCK: usize = 64;

/// `out = op(a) * op(b)` for an `m x n` result with inner dimension `k`,
/// where `a` element `(i, p)` sits at `i * rsa + p * csa` and `b` element
/// `(p, j)` at `p * rsb + j * csb`.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let block = |(blk, chunk): (usize, &mut [f64])| {
        let rows = chunk.len() / n;
        let a_off = blk * GEMM_ROW_BLOCK * rsa;
        // SAFETY: the strides describe in-bounds views of `a`, `b` and
        // `chunk` for the given dimensions, and `chunk` is exclusively ours.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(GEMM_ROW_BLOCK * n).enumerate().for_each(block);
    } else {
        out.chunks_mut(GEMM_ROW_BLOCK * n).enumerate().for_each(block);
    }
    out
}

/// `out = a (m x k) * b (k x n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n, "matmul operand too short");
    gemm(a, k, 1, b, n, 1, m, k, n)
}

/// `out = a (m x k) * b^T` where `b` is `n x k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= n * k, "matmul operand too short");
    gemm(a, k, 1, b, 1, k, m, k, n)
}

/// `out = a^T * b` where `a` is `k x m` and `b` is `k x n`; result is `m x n`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= k * m && b.len() >= k * n, "matmul operand too short");
    gemm(a, 1, m, b, n, 1, m, k, n)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    if cols == 0 {
        return out;
    }
    let row = |(r, out_row): (usize, &mut [f64])| {
        let src = &x[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(src) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    };
    if rows >= PAR_MIN_ROWS {
        out.par_chunks_mut(cols).enumerate().for_each(row);
    } else {
        out.chunks_mut(cols).enumerate().for_each(row);
    }
    out
}

/// Numerically stable `ln(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

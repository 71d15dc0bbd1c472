//! Raw buffer kernels shared by the taped and plain operation paths.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;

/// `a (m x k) . b (k x n)`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a (m x k) . b^T (k x n)` where `b` is stored `n x k`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T (k x m) . b (m x n)` where `a` is stored `m x k`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `out[i, :] = sum_{j in idx} a[i, j] * x[j, :]` — multiplies the columns
/// of a constant `d x d` matrix selected by `idx` against the matching rows
/// of `x (d x s)` without materializing any `d x d` intermediate.
pub fn col_select_matmul(a: &[f64], x: &[f64], d: usize, s: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; d * s];
    for i in 0..d {
        let arow = &a[i * d..(i + 1) * d];
        let orow = &mut out[i * s..(i + 1) * s];
        for &j in idx {
            let aij = arow[j];
            if aij == 0.0 {
                continue;
            }
            let xrow = &x[j * s..(j + 1) * s];
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                *o += aij * xv;
            }
        }
    }
    out
}

/// Backward of [`col_select_matmul`]: `dx[j, :] = sum_i a[i, j] * g[i, :]`
/// for `j` in `idx`, zero elsewhere.
pub fn col_select_matmul_grad(a: &[f64], g: &[f64], d: usize, s: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; d * s];
    for i in 0..d {
        let arow = &a[i * d..(i + 1) * d];
        let grow = &g[i * s..(i + 1) * s];
        for &j in idx {
            let aij = arow[j];
            if aij == 0.0 {
                continue;
            }
            let orow = &mut out[j * s..(j + 1) * s];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aij * gv;
            }
        }
    }
    out
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| fmath::sigmoid(v)).collect()
}

pub fn tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| fmath::tanh(v)).collect()
}

pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect()
}

/// Row-wise softmax in place, max-shifted for stability.
pub fn softmax_rows_inplace(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = fmath::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

//! Forward and adjoint kernels for the structured ops used by the score
//! network. Layout conventions:
//!
//! * sequence tensors are `[M, C, T]` (M = batch × nodes, channels, time);
//! * node-major tensors are `[B, N, F]` where `F` flattens everything after
//!   the node axis.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub m: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn t_out(&self) -> usize {
        (self.t_in + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Output positions `to` whose tap `j` lands inside the input.
fn valid_range(g: &ConvGeom, j: usize, t_out: usize) -> (usize, usize) {
    // ti = to·stride + j − pad must lie in [0, t_in)
    let lo = g.pad.saturating_sub(j).div_ceil(g.stride);
    let hi = if g.t_in + g.pad > j {
        ((g.t_in + g.pad - j - 1) / g.stride + 1).min(t_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// `col[(c, j), (m, to)] = x[m, c, to*stride + j - pad]`, zero outside.
fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let t_out = g.t_out();
    let cols = g.m * t_out;
    let mut col = vec![0.0; g.c_in * g.k * cols];
    for j in 0..g.k {
        let (lo, hi) = valid_range(g, j, t_out);
        if lo >= hi {
            continue;
        }
        let first = lo * g.stride + j - g.pad;
        for c in 0..g.c_in {
            let row = &mut col[(c * g.k + j) * cols..(c * g.k + j + 1) * cols];
            for m in 0..g.m {
                let xs = &x[(m * g.c_in + c) * g.t_in..(m * g.c_in + c + 1) * g.t_in];
                let dst = &mut row[m * t_out + lo..m * t_out + hi];
                if g.stride == 1 {
                    dst.copy_from_slice(&xs[first..first + (hi - lo)]);
                } else {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = xs[first + i * g.stride];
                    }
                }
            }
        }
    }
    col
}

fn col2im_add(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let t_out = g.t_out();
    let cols = g.m * t_out;
    for j in 0..g.k {
        let (lo, hi) = valid_range(g, j, t_out);
        if lo >= hi {
            continue;
        }
        let first = lo * g.stride + j - g.pad;
        for c in 0..g.c_in {
            let row = &col[(c * g.k + j) * cols..(c * g.k + j + 1) * cols];
            for m in 0..g.m {
                let dxs = &mut dx[(m * g.c_in + c) * g.t_in..(m * g.c_in + c + 1) * g.t_in];
                let src = &row[m * t_out + lo..m * t_out + hi];
                for (i, &v) in src.iter().enumerate() {
                    dxs[first + i * g.stride] += v;
                }
            }
        }
    }
}

pub fn conv1d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let t_out = g.t_out();
    let cols = g.m * t_out;
    let col = im2col(g, x);
    let mut y_cm = vec![0.0; g.c_out * cols];
    gemm_nn(g.c_out, g.c_in * g.k, cols, w, &col, &mut y_cm);
    let mut y = vec![0.0; g.m * g.c_out * t_out];
    for co in 0..g.c_out {
        let b = bias.map_or(0.0, |b| b[co]);
        for m in 0..g.m {
            let src = &y_cm[co * cols + m * t_out..co * cols + (m + 1) * t_out];
            let dst = &mut y[(m * g.c_out + co) * t_out..(m * g.c_out + co + 1) * t_out];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)` for upstream gradient `dy` of shape `[M, C_out, T_out]`.
pub fn conv1d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let t_out = g.t_out();
    let cols = g.m * t_out;
    let ck = g.c_in * g.k;
    let mut db = vec![0.0; g.c_out];
    for (i, chunk) in dy.chunks(t_out).enumerate() {
        db[i % g.c_out] += chunk.iter().sum::<f64>();
    }
    let mut dw = vec![0.0; g.c_out * ck];
    // dY in [C_out, (M, T_out)] layout
    let mut dy_cm = vec![0.0; g.c_out * cols];
    for m in 0..g.m {
        for co in 0..g.c_out {
            let src = &dy[(m * g.c_out + co) * t_out..(m * g.c_out + co + 1) * t_out];
            dy_cm[co * cols + m * t_out..co * cols + (m + 1) * t_out].copy_from_slice(src);
        }
    }
    let col = im2col(g, x);
    gemm_nt(g.c_out, cols, ck, &dy_cm, &col, &mut dw);
    let dx = if need_dx {
        let mut dcol = vec![0.0; ck * cols];
        gemm_tn(ck, g.c_out, cols, w, &dy_cm, &mut dcol);
        let mut dx = vec![0.0; x.len()];
        col2im_add(g, &dcol, &mut dx);
        Some(dx)
    } else {
        None
    };
    (dx, dw, db)
}

/// `y[b, i, f] = Σ_j a[i, j] · x[b, j, f]`
pub fn node_mix(a: &[f64], n: usize, x: &[f64], f: usize) -> Vec<f64> {
    let b = x.len() / (n * f);
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        gemm_nn(
            n,
            n,
            f,
            a,
            &x[bi * n * f..(bi + 1) * n * f],
            &mut y[bi * n * f..(bi + 1) * n * f],
        );
    }
    y
}

/// Adjoint of [`node_mix`]: `dx[b, j, f] = Σ_i a[i, j] · dy[b, i, f]`.
pub fn node_mix_adjoint(a: &[f64], n: usize, dy: &[f64], f: usize) -> Vec<f64> {
    let b = dy.len() / (n * f);
    let mut dx = vec![0.0; dy.len()];
    for bi in 0..b {
        gemm_tn(
            n,
            n,
            f,
            a,
            &dy[bi * n * f..(bi + 1) * n * f],
            &mut dx[bi * n * f..(bi + 1) * n * f],
        );
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

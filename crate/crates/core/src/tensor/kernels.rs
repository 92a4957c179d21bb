//! Loop kernels shared by the forward and backward passes.

use std::ops::Range;

use crate::error::{Error, Result};

use super::array::numel;

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// How an input of shape `inp` is laid out against a broadcast output.
pub(crate) enum Bcast {
    /// Same shape as the output.
    Identity,
    /// Input equals a trailing block of the output and repeats: `idx % len`.
    Repeat(usize),
    /// Explicit output-index → input-index table.
    Table(Vec<usize>),
}

impl Bcast {
    pub(crate) fn new(out: &[usize], inp: &[usize]) -> Self {
        let n_in = numel(inp);
        if out == inp {
            return Bcast::Identity;
        }
        // Trailing dims equal after stripping leading ones from the input.
        let stripped: Vec<usize> = inp.iter().copied().skip_while(|&d| d == 1).collect();
        if stripped.len() <= out.len() && out[out.len() - stripped.len()..] == stripped[..] {
            return Bcast::Repeat(n_in);
        }
        Bcast::Table(index_table(out, inp))
    }

    #[inline]
    pub(crate) fn map(&self, i: usize) -> usize {
        match self {
            Bcast::Identity => i,
            Bcast::Repeat(n) => i % n,
            Bcast::Table(t) => t[i],
        }
    }
}

/// Elementwise `f(a, b)` over an output of `n` elements with broadcast inputs.
pub(crate) fn zip_bcast(n: usize, a: &[f64], ma: &Bcast, b: &[f64], mb: &Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    match (ma, mb) {
        (Bcast::Identity, Bcast::Identity) => out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y))),
        (Bcast::Identity, Bcast::Repeat(m)) => {
            for ch in a.chunks(*m) {
                out.extend(ch.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
        }
        (Bcast::Repeat(m), Bcast::Identity) => {
            for ch in b.chunks(*m) {
                out.extend(a.iter().zip(ch).map(|(&x, &y)| f(x, y)));
            }
        }
        _ => out.extend((0..n).map(|i| f(a[ma.map(i)], b[mb.map(i)]))),
    }
    out
}

/// `dst[m(k)] += scale * g[k]`: reduces an output gradient onto a broadcast input.
pub(crate) fn reduce_bcast(dst: &mut [f64], m: &Bcast, g: &[f64], scale: f64) {
    match m {
        Bcast::Identity => dst.iter_mut().zip(g).for_each(|(d, &x)| *d += scale * x),
        Bcast::Repeat(n) => {
            for ch in g.chunks(*n) {
                dst.iter_mut().zip(ch).for_each(|(d, &x)| *d += scale * x);
            }
        }
        Bcast::Table(t) => {
            for (&i, &x) in t.iter().zip(g) {
                dst[i] += scale * x;
            }
        }
    }
}

fn index_table(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - inp.len();
    // Input strides aligned to the output rank, zero where broadcast.
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..inp.len()).rev() {
        if inp[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= inp[i];
    }
    let total = numel(out);
    let mut table = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        table.push(pos);
        for d in (0..rank).rev() {
            index[d] += 1;
            pos += strides[d];
            if index[d] < out[d] {
                break;
            }
            pos -= strides[d] * out[d];
            index[d] = 0;
        }
    }
    table
}

/// `c[p×r] += a[p×q] · b[q×r]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx2(a, b, c, p, q, r) };
            return;
        }
    }
    gemm_kernel(a, b, c, p, q, r);
}

/// Same loop compiled for wider vectors. Multiplies and adds stay separate
/// (no contraction), so results match the portable path bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    gemm_kernel(a, b, c, p, q, r);
}

const MB: usize = 4;
const NB: usize = 8;
const ITILE: usize = 64;
const KTILE: usize = 128;

#[inline(always)]
fn gemm_kernel(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    // Each output element accumulates over k in order, starting from its
    // current value; tiling only changes which values stay in registers/L1.
    for k0 in (0..q).step_by(KTILE) {
        let ks = k0..(k0 + KTILE).min(q);
        for i0 in (0..p).step_by(ITILE) {
            gemm_tile(a, b, c, q, r, i0..(i0 + ITILE).min(p), ks.clone());
        }
    }
}

#[inline(always)]
fn gemm_tile(a: &[f64], b: &[f64], c: &mut [f64], q: usize, r: usize, is: Range<usize>, ks: Range<usize>) {
    let jfull = r - r % NB;
    for j in (0..jfull).step_by(NB) {
        let mut i = is.start;
        while i + MB <= is.end {
            let mut acc = [[0.0f64; NB]; MB];
            for (m, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + m) * r + j..(i + m) * r + j + NB]);
            }
            for k in ks.clone() {
                let bk = &b[k * r + j..k * r + j + NB];
                for (m, row) in acc.iter_mut().enumerate() {
                    let aik = a[(i + m) * q + k];
                    for t in 0..NB {
                        row[t] += aik * bk[t];
                    }
                }
            }
            for (m, row) in acc.iter().enumerate() {
                c[(i + m) * r + j..(i + m) * r + j + NB].copy_from_slice(row);
            }
            i += MB;
        }
        for i in i..is.end {
            let mut acc = [0.0f64; NB];
            acc.copy_from_slice(&c[i * r + j..i * r + j + NB]);
            for k in ks.clone() {
                let aik = a[i * q + k];
                let bk = &b[k * r + j..k * r + j + NB];
                for t in 0..NB {
                    acc[t] += aik * bk[t];
                }
            }
            c[i * r + j..i * r + j + NB].copy_from_slice(&acc);
        }
    }
    if jfull < r {
        for i in is {
            let crow = &mut c[i * r + jfull..(i + 1) * r];
            for k in ks.clone() {
                let aik = a[i * q + k];
                for (cv, bv) in crow.iter_mut().zip(&b[k * r + jfull..(k + 1) * r]) {
                    *cv += aik * bv;
                }
            }
        }
    }
}

/// Row-major transpose of an `rows × cols` matrix.
pub(crate) fn transpose2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// `ga[p×q] += g[p×r] · bᵀ`
pub(crate) fn gemm_nt_acc(g: &[f64], b: &[f64], ga: &mut [f64], p: usize, q: usize, r: usize) {
    let bt = transpose2(b, q, r);
    gemm_acc(g, &bt, ga, p, r, q);
}

/// `gb[q×r] += aᵀ · g[p×r]`
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], gb: &mut [f64], p: usize, q: usize, r: usize) {
    let at = transpose2(a, p, q);
    gemm_acc(&at, g, gb, q, p, r);
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element of `permute(x, perm)`, the linear index in `x`.
pub(crate) fn permute_table(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let rank = shape.len();
    let mut table = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        table.push(pos);
        for d in (0..rank).rev() {
            index[d] += 1;
            pos += src_strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            pos -= src_strides[d] * out_shape[d];
            index[d] = 0;
        }
    }
    table
}

/// Splits a shape around `axis` into (outer, len, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

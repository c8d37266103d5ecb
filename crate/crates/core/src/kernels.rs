//! Raw slice kernels behind the tape operations. All matrices are row-major.

use alloc::vec;
use alloc::vec::Vec;

const MR: usize = 4;
const NR: usize = 8;

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Full `MR×NR` tiles of `c` are accumulated in registers across the whole
/// inner dimension; ragged edges fall back to a row-streaming loop.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let b_row: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("tile width");
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for (x, &bv) in acc_row.iter_mut().zip(b_row) {
                        *x += av * bv;
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                let dst = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for (d, &x) in dst.iter_mut().zip(acc_row) {
                    *d += x;
                }
            }
        }
    }
    // right edge of the full row blocks, then the remaining rows
    if n_full < n {
        for i in 0..m_full {
            stream_row(&a[i * k..(i + 1) * k], b, n, n_full..n, &mut c[i * n..(i + 1) * n]);
        }
    }
    for i in m_full..m {
        stream_row(&a[i * k..(i + 1) * k], b, n, 0..n, &mut c[i * n..(i + 1) * n]);
    }
}

fn stream_row(a_row: &[f64], b: &[f64], n: usize, cols: core::ops::Range<usize>, c_row: &mut [f64]) {
    for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
        if av == 0.0 {
            continue;
        }
        for (cv, &bv) in c_row[cols.clone()].iter_mut().zip(&b_row[cols.clone()]) {
            *cv += av * bv;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    let at = transpose(a, k, m);
    gemm_nn(&at, b, m, k, n, c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, m, k, n, c);
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; a.len()];
    for (i, row) in a.chunks_exact(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
    out
}

/// Unfolds an `h×w×c` map into `(h·w) × (9·c)` rows of zero-padded 3×3
/// neighbourhoods. Column order is `(ky, kx, channel)`, matching a
/// `3×3×c×d` kernel read as a `(9·c) × d` matrix.
pub(crate) fn im2col_3x3(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let width = 9 * c;
    let mut cols = vec![0.0; h * w * width];
    for r in 0..h {
        for q in 0..w {
            let row = &mut cols[(r * w + q) * width..(r * w + q + 1) * width];
            for ky in 0..3 {
                let sr = r as isize + ky as isize - 1;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sq = q as isize + kx as isize - 1;
                    if sq < 0 || sq >= w as isize {
                        continue;
                    }
                    let src = (sr as usize * w + sq as usize) * c;
                    let dst = (ky * 3 + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_3x3`]: scatters column gradients back onto the map.
pub(crate) fn col2im_3x3_add(cols: &[f64], h: usize, w: usize, c: usize, dx: &mut [f64]) {
    let width = 9 * c;
    for r in 0..h {
        for q in 0..w {
            let row = &cols[(r * w + q) * width..(r * w + q + 1) * width];
            for ky in 0..3 {
                let sr = r as isize + ky as isize - 1;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sq = q as isize + kx as isize - 1;
                    if sq < 0 || sq >= w as isize {
                        continue;
                    }
                    let dst = (sr as usize * w + sq as usize) * c;
                    let src = (ky * 3 + kx) * c;
                    for (d, &s) in dx[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

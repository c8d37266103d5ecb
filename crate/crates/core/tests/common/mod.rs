//! Brute-force reference implementations and helpers shared by the
//! integration tests. Every oracle is written as plain nested loops over
//! indices, independent of the tape and its kernels.

#![allow(dead_code)]

use hlfusion_core::{Tape, Tensor, Var};
use rand::Rng;

pub fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, random_vec(rng, n)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// 3×3 zero-padded convolution; `x` is `h×w×cin`, `k` is `3×3×cin×cout`.
pub fn conv2d_same(x: &[f64], h: usize, w: usize, cin: usize, k: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for r in 0..h {
        for c in 0..w {
            for o in 0..cout {
                let mut s = b[o];
                for kr in 0..3 {
                    for kc in 0..3 {
                        let (rr, cc) = (r as isize + kr as isize - 1, c as isize + kc as isize - 1);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        for i in 0..cin {
                            let xv = x[((rr as usize) * w + cc as usize) * cin + i];
                            s += xv * k[((kr * 3 + kc) * cin + i) * cout + o];
                        }
                    }
                }
                out[(r * w + c) * cout + o] = s;
            }
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
        let total: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / total));
    }
    out
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let c = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            out.push(gamma[j] * (row[j] - mean) / (var + eps).sqrt() + beta[j]);
        }
    }
    out
}

/// `softmax_rows(q·kᵀ/√d)` for `n×d` token matrices.
pub fn self_attention(q: &[f64], k: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum();
            scores[i * n + j] = dot / (d as f64).sqrt();
        }
    }
    softmax_rows(&scores, n)
}

/// Random row-stochastic `n×n` matrix.
pub fn random_stochastic<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let mut out = Vec::with_capacity(n * n);
    for row in raw.chunks(n) {
        let total: f64 = row.iter().sum();
        out.extend(row.iter().map(|v| v / total));
    }
    out
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Builds `Σ r ⊙ op(inputs)` with fixed random weights `r`, so every output
/// element contributes to the checked gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var, r: &[f64]) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.leaf(&Tensor::new(&shape, r.to_vec()).unwrap());
    let n = r.len();
    let a = tape.reshape(out, &[1, n]).unwrap();
    let b = tape.reshape(w, &[n, 1]).unwrap();
    let dot = tape.matmul(a, b).unwrap();
    tape.sum(dot)
}

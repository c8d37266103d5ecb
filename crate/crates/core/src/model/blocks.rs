//! Building blocks of a stack: filter block, attention, cross decoding and
//! CrossOut. All of them record onto a caller-provided [`Tape`].

use libm::sqrt;

use super::config::Activation;
use crate::error::{invalid, mismatch, Result};
use crate::tape::{Tape, Var};

/// Tape handles for one filter block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct FilterVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
}

/// Tolerance on attention row sums accepted by [`cross_decode`].
pub const ROW_SUM_TOL: f64 = 1e-6;

pub fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// Conv2D (3×3, same padding) → channel layer norm → activation.
pub fn filter_block(tape: &mut Tape, x: Var, p: &FilterVars, act: Activation, eps: f64) -> Result<Var> {
    let conv = tape.conv2d_same(x, p.conv_w, p.conv_b)?;
    let norm = tape.layer_norm(conv, p.ln_gamma, p.ln_beta, eps)?;
    Ok(activate(tape, norm, act))
}

/// Flattens a `p×p×d` map into `p²` row-major tokens of width `d`.
pub fn tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 3 {
        return Err(invalid("tokens", "expects an H×W×C map"));
    }
    let shape = [s[0] * s[1], s[2]];
    tape.reshape(x, &shape)
}

/// Inverse of [`tokens`] for a square map of side `side`.
pub fn untokens(tape: &mut Tape, x: Var, side: usize) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 2 || s[0] != side * side {
        return Err(mismatch("untokens", s, &[side * side]));
    }
    let shape = [side, side, s[1]];
    tape.reshape(x, &shape)
}

/// `softmax_rows(Q·Kᵀ / √d)` over `n×d` token matrices.
pub fn self_attention(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let (sq, sk) = (tape.shape(q), tape.shape(k));
    if sq.len() != 2 || sq != sk {
        return Err(mismatch("self_attention", sq, sk));
    }
    let d = sq[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / sqrt(d as f64));
    tape.softmax_rows(scaled)
}

/// `A·V`: every output token is the attention-weighted mix of the rows of `V`.
pub fn cross_decode(tape: &mut Tape, a: Var, v: Var) -> Result<Var> {
    let (sa, sv) = (tape.shape(a), tape.shape(v));
    if sa.len() != 2 || sa[0] != sa[1] || sv.len() != 2 || sv[0] != sa[1] {
        return Err(mismatch("cross_decode", sa, sv));
    }
    let n = sa[0];
    for row in tape.value(a).chunks_exact(n) {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&w| w < 0.0) {
            return Err(invalid("cross_decode", "attention rows must be probability vectors"));
        }
    }
    tape.matmul(a, v)
}

/// Residual sum of two token matrices followed by layer normalization.
pub fn cross_out(tape: &mut Tape, x1: Var, x2: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let sum = tape.add(x1, x2)?;
    tape.layer_norm(sum, gamma, beta, eps)
}

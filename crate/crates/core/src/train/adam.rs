use alloc::vec;
use alloc::vec::Vec;

use super::TrainConfig;
use crate::error::{invalid, Result};
use crate::tensor::ParamStore;

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        Self { m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update at step `t` (1-based) using the gradient
/// buffers currently held by `params`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, t: u64, cfg: &TrainConfig) -> Result<()> {
    if t < 1 {
        return Err(invalid("adam_step", "step index starts at 1"));
    }
    if state.m.len() != params.len() {
        return Err(invalid("adam_step", "optimizer state does not match the parameters"));
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for ((tensor, m), v) in params.tensors_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = tensor.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        for (((p, gi), mi), vi) in tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= cfg.learning_rate * m_hat / (libm::sqrt(v_hat) + cfg.adam_eps);
        }
    }
    Ok(())
}

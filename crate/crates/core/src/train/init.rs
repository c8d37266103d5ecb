use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Bound of the Glorot uniform distribution, `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

/// Tensor of i.i.d. draws from `U[−bound, bound]` with the Glorot bound.
pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(invalid("glorot_uniform", "fans must be positive"));
    }
    let bound = glorot_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
}

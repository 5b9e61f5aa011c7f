//! Sinusoidal timestep embedding.

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Embeds an integer timestep as `dim/2` sine values followed by
/// `dim/2` cosine values over log-spaced frequencies (base period
/// 10000). `total` is the schedule length and only bounds `t`.
pub fn timestep_embedding<T: Scalar>(
    t: usize,
    dim: usize,
    total: usize,
) -> Result<Tensor<T>, TensorError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(TensorError::invalid("timestep_embedding", format!("dim {dim} must be even")));
    }
    if t >= total {
        return Err(TensorError::invalid(
            "timestep_embedding",
            format!("t {t} out of range for T {total}"),
        ));
    }
    let half = dim / 2;
    let mut data = vec![T::zero(); dim];
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = (-exponent * 10000f64.ln()).exp();
        let arg = t as f64 * freq;
        data[i] = T::from_f64(arg.sin());
        data[half + i] = T::from_f64(arg.cos());
    }
    Tensor::new(vec![dim], data)
}

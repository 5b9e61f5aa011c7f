//! Adam with bias correction.

use super::UNetParams;
use crate::error::TensorError;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One optimizer step over every parameter. Requires gradients to have
/// been populated since the last step; zeroes them afterward and
/// increments the step counter by exactly one.
pub fn adam_step<T: Scalar>(params: &mut UNetParams<T>, cfg: &AdamConfig) -> Result<(), TensorError> {
    if !params.grads_populated() {
        return Err(TensorError::GradsMissing);
    }
    params.step += 1;
    let t = params.step;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);

    for (_, p) in params.iter_mut() {
        let g = p.grad.data().to_vec();
        for i in 0..g.len() {
            let gi = g[i];
            let m = b1 * p.m.data()[i] + (one - b1) * gi;
            let v = b2 * p.v.data()[i] + (one - b2) * gi * gi;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            let upd = lr * mhat / (vhat.sqrt() + eps);
            let w = p.value.data()[i];
            p.value.data_mut()[i] = w - upd;
        }
    }
    params.zero_grads();
    Ok(())
}

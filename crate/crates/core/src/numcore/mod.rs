//! Differentiable array computation for a small transformer.

pub mod kernels;
pub mod layers;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use kernels::{cosine, mean_pool, softmax_rows};
pub use layers::{transformer_block, BlockVars};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DTensor, Real};

use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every element `i`.
pub fn finite_difference_grad<T, F>(mut f: F, x: &DTensor<T>, eps: T) -> Result<DTensor<T>>
where
    T: Real,
    F: FnMut(&DTensor<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::Precondition(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    let two_eps = eps + eps;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while probing element {i}"
            )));
        }
        grad.push((fp - fm) / two_eps);
    }
    DTensor::new(x.shape().to_vec(), grad)
}

/// Relative error used by gradient checks: `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

//! Random spatial masks: a cell is dropped (0) when its uniform draw falls
//! below the mask ratio, and kept (1) otherwise.

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// A `(1, 1, h, w)` mask shared by every channel of a layer.
pub fn sample_mask(rng: &mut Rng, height: usize, width: usize, ratio: f64) -> Result<Tensor4> {
    sample_batch_mask(rng, 1, height, width, ratio)
}

/// One independent spatial mask per batch item, shape `(n, 1, h, w)`.
pub fn sample_batch_mask(
    rng: &mut Rng,
    batch: usize,
    height: usize,
    width: usize,
    ratio: f64,
) -> Result<Tensor4> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid(format!("mask ratio must lie in [0, 1], got {ratio}")));
    }
    let data = (0..batch * height * width)
        .map(|_| if rng.uniform() < ratio { 0.0 } else { 1.0 })
        .collect();
    Tensor4::new([batch, 1, height, width], data)
}

pub fn zero_fraction(mask: &Tensor4) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.data().iter().filter(|&&v| v == 0.0).count() as f64 / mask.len() as f64
}

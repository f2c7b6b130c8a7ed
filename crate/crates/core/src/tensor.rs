//! Dense rank-4 tensors in `(batch, channel, height, width)` row-major order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::rng::Rng;

/// Dense `(n, c, h, w)` tensor of `f32`, row-major.
///
/// Every constructor rejects non-finite values, so a `Tensor4` obtained
/// through the public API never carries NaN or infinity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(mismatch(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element at flat index {pos}")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: [usize; 4], value: f32) -> Self {
        assert!(value.is_finite());
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = f(ni, ci, y, x);
                        assert!(v.is_finite(), "from_fn produced a non-finite value");
                        data.push(v);
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// Values drawn uniformly from `[low, high)`.
    pub fn random_uniform(dims: [usize; 4], rng: &mut Rng, low: f32, high: f32) -> Self {
        let len = dims.iter().product();
        let data = (0..len)
            .map(|_| rng.uniform_range(low as f64, high as f64) as f32)
            .collect();
        Self { dims, data }
    }

    pub fn random_normal(dims: [usize; 4], rng: &mut Rng, std: f32) -> Self {
        let len = dims.iter().product();
        let data = (0..len).map(|_| (rng.normal() * std as f64) as f32).collect();
        Self { dims, data }
    }

    /// Builds a tensor from `f64` values, rounding to `f32`.
    pub(crate) fn from_f64(dims: [usize; 4], values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Number of spatial cells in one `(n, c)` plane.
    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.dims;
        ((n * cs + c) * hs + y) * ws + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// Sets one element. Panics on a non-finite value.
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f32) {
        assert!(value.is_finite());
        let i = self.index(n, c, y, x);
        self.data[i] = value;
    }

    /// The spatial plane of channel `c` in batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let len = self.plane_len();
        let start = (n * self.dims[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_dims(other.dims, "zip_map")?;
        Self::new(
            self.dims,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn scale(&self, factor: f32) -> Result<Self> {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self + factor * other`, the SGD update shape.
    pub fn axpy(&self, factor: f32, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + factor * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        self.expect_dims(other.dims, "l1_distance")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum())
    }

    pub(crate) fn expect_dims(&self, dims: [usize; 4], what: &str) -> Result<()> {
        if self.dims == dims {
            Ok(())
        } else {
            Err(mismatch(format!("{what}: expected dims {dims:?}, got {:?}", self.dims)))
        }
    }
}

/// Softmax over the spatial cells of every `(n, c)` plane, with logits
/// divided by `temperature`. Each plane of the result sums to one.
pub fn spatial_softmax(x: &Tensor4, temperature: f64) -> Result<Tensor4> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    if x.is_empty() {
        return Err(invalid("spatial_softmax of an empty tensor"));
    }
    let plane = x.plane_len();
    let mut out = vec![0.0f32; x.len()];
    out.par_chunks_mut(plane)
        .zip(x.data().par_chunks(plane))
        .for_each(|(dst, src)| {
            let probs = softmax_plane(src, temperature);
            for (d, p) in dst.iter_mut().zip(probs) {
                *d = p as f32;
            }
        });
    Tensor4::new(x.dims(), out)
}

/// Max-subtracted softmax of one plane in `f64`.
pub(crate) fn softmax_plane(logits: &[f32], temperature: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|&v| v as f64 / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&v| (v as f64 / temperature - max).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

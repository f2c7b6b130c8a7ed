//! Stride-1 2-D cross-correlation with 1×1 or 3×3 kernels.
//!
//! 3×3 kernels use zero padding of one cell, so every layer preserves the
//! spatial extent of its input. Kernels run on `f64` buffers internally;
//! the public entry points take and return `f32` tensors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// Convolution parameters. Also used as the container for parameter
/// gradients, which have exactly the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    /// `(out, in, k, k)` row-major.
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(invalid(format!("kernel size must be 1 or 3, got {kernel}")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(invalid("convolution needs at least one input and output channel"));
        }
        let expected = out_channels * in_channels * kernel * kernel;
        if weight.len() != expected {
            return Err(mismatch(format!(
                "weight needs {expected} values, got {}",
                weight.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(mismatch(format!(
                "bias needs {out_channels} values, got {}",
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("convolution parameter".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        })
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(
            in_channels,
            out_channels,
            kernel,
            vec![0.0; out_channels * in_channels * kernel * kernel],
            vec![0.0; out_channels],
        )
    }

    /// Channel-identity layer: output channel `i` copies input channel `i`.
    /// For 3×3 kernels only the centre tap is set.
    pub fn identity(channels: usize, kernel: usize) -> Result<Self> {
        let mut layer = Self::zeros(channels, channels, kernel)?;
        let centre = kernel / 2;
        for c in 0..channels {
            let i = layer.weight_index(c, c, centre, centre);
            layer.weight[i] = 1.0;
        }
        Ok(layer)
    }

    /// Weights and biases uniform in `±sqrt(1 / fan_in)`, `fan_in = in·k·k`.
    pub fn init_uniform(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = (1.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.uniform_range(-bound, bound) as f32)
            .collect();
        let bias = (0..out_channels)
            .map(|_| rng.uniform_range(-bound, bound) as f32)
            .collect();
        Self::new(in_channels, out_channels, kernel, weight, bias)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f32] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn weight_index(&self, out: usize, inp: usize, ky: usize, kx: usize) -> usize {
        ((out * self.in_channels + inp) * self.kernel + ky) * self.kernel + kx
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.in_channels == other.in_channels
            && self.out_channels == other.out_channels
            && self.kernel == other.kernel
    }

    /// Number of scalar parameters (weights then biases).
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn param(&self, i: usize) -> f32 {
        if i < self.weight.len() {
            self.weight[i]
        } else {
            self.bias[i - self.weight.len()]
        }
    }

    pub fn set_param(&mut self, i: usize, value: f32) {
        let wl = self.weight.len();
        if i < wl {
            self.weight[i] = value;
        } else {
            self.bias[i - wl] = value;
        }
    }

    /// `self + factor * grad`; with a negative factor this is an SGD step.
    pub fn axpy(&self, factor: f32, grad: &Self) -> Result<Self> {
        if !self.same_shape(grad) {
            return Err(mismatch("gradient shape differs from layer shape"));
        }
        let weight = self
            .weight
            .iter()
            .zip(&grad.weight)
            .map(|(&p, &g)| p + factor * g)
            .collect();
        let bias = self
            .bias
            .iter()
            .zip(&grad.bias)
            .map(|(&p, &g)| p + factor * g)
            .collect();
        Self::new(self.in_channels, self.out_channels, self.kernel, weight, bias)
    }

    pub(crate) fn from_f64_parts(like: &Self, weight: &[f64], bias: &[f64]) -> Result<Self> {
        Self::new(
            like.in_channels,
            like.out_channels,
            like.kernel,
            weight.iter().map(|&v| v as f32).collect(),
            bias.iter().map(|&v| v as f32).collect(),
        )
    }

    pub(crate) fn weight_as_tensor(&self) -> Tensor4 {
        Tensor4::new(
            [self.out_channels, self.in_channels, self.kernel, self.kernel],
            self.weight.clone(),
        )
        .expect("layer weights are validated on construction")
    }

    pub(crate) fn bias_as_tensor(&self) -> Tensor4 {
        Tensor4::new([1, self.out_channels, 1, 1], self.bias.clone())
            .expect("layer biases are validated on construction")
    }

    pub(crate) fn from_tensors(weight: &Tensor4, bias: &Tensor4) -> Result<Self> {
        let [out, inp, kh, kw] = weight.dims();
        if kh != kw {
            return Err(invalid("convolution kernels must be square"));
        }
        if bias.dims() != [1, out, 1, 1] {
            return Err(mismatch(format!(
                "bias tensor dims {:?} do not match {out} output channels",
                bias.dims()
            )));
        }
        Self::new(inp, out, kh, weight.data().to_vec(), bias.data().to_vec())
    }
}

fn check_input(dims: [usize; 4], layer: &ConvLayer) -> Result<()> {
    if dims[1] != layer.in_channels {
        return Err(mismatch(format!(
            "layer expects {} input channels, tensor has {}",
            layer.in_channels, dims[1]
        )));
    }
    Ok(())
}

pub fn conv2d_forward(x: &Tensor4, layer: &ConvLayer) -> Result<Tensor4> {
    check_input(x.dims(), layer)?;
    let [n, _, h, w] = x.dims();
    let out = forward_f64(&x.to_f64(), x.dims(), layer);
    Tensor4::from_f64([n, layer.out_channels, h, w], &out)
}

/// Gradients of a scalar loss with respect to the layer input and parameters,
/// given the gradient with respect to the layer output.
pub fn conv2d_backward(
    x: &Tensor4,
    layer: &ConvLayer,
    grad_out: &Tensor4,
) -> Result<(Tensor4, ConvLayer)> {
    check_input(x.dims(), layer)?;
    let [n, _, h, w] = x.dims();
    grad_out.expect_dims([n, layer.out_channels, h, w], "conv2d_backward grad_out")?;
    let go = grad_out.to_f64();
    let gx = backward_input_f64(&go, x.dims(), layer);
    let (gw, gb) = backward_params_f64(&x.to_f64(), x.dims(), &go, layer);
    Ok((
        Tensor4::from_f64(x.dims(), &gx)?,
        ConvLayer::from_f64_parts(layer, &gw, &gb)?,
    ))
}

pub(crate) fn forward_f64(input: &[f64], dims: [usize; 4], layer: &ConvLayer) -> Vec<f64> {
    let [_, cin, h, w] = dims;
    let k = layer.kernel;
    let pad = (k / 2) as isize;
    let plane = h * w;
    let cout = layer.out_channels;
    let mut out = vec![0.0f64; dims[0] * cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (ni, co) = (idx / cout, idx % cout);
        dst.fill(layer.bias[co] as f64);
        for ci in 0..cin {
            let src = &input[(ni * cin + ci) * plane..][..plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = layer.weight[layer.weight_index(co, ci, ky, kx)] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let row = &src[sy as usize * w..][..w];
                        let drow = &mut dst[y * w..][..w];
                        for (x, d) in drow.iter_mut().enumerate() {
                            let sx = x as isize + dx;
                            if sx >= 0 && sx < w as isize {
                                *d += wv * row[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn backward_input_f64(grad_out: &[f64], dims: [usize; 4], layer: &ConvLayer) -> Vec<f64> {
    let [_, cin, h, w] = dims;
    let k = layer.kernel;
    let pad = (k / 2) as isize;
    let plane = h * w;
    let cout = layer.out_channels;
    let mut gx = vec![0.0f64; dims[0] * cin * plane];
    // gx[ci, y', x'] = sum over co, taps of g[co, y' - dy, x' - dx] * w[co, ci, tap]
    gx.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (ni, ci) = (idx / cin, idx % cin);
        for co in 0..cout {
            let g = &grad_out[(ni * cout + co) * plane..][..plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = layer.weight[layer.weight_index(co, ci, ky, kx)] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let oy = y as isize - dy;
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        let grow = &g[oy as usize * w..][..w];
                        let drow = &mut dst[y * w..][..w];
                        for (x, d) in drow.iter_mut().enumerate() {
                            let ox = x as isize - dx;
                            if ox >= 0 && ox < w as isize {
                                *d += wv * grow[ox as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub(crate) fn backward_params_f64(
    input: &[f64],
    dims: [usize; 4],
    grad_out: &[f64],
    layer: &ConvLayer,
) -> (Vec<f64>, Vec<f64>) {
    let [n, cin, h, w] = dims;
    let k = layer.kernel;
    let pad = (k / 2) as isize;
    let plane = h * w;
    let cout = layer.out_channels;
    let per_out = cin * k * k;
    let mut gw = vec![0.0f64; cout * per_out];
    gw.par_chunks_mut(per_out).enumerate().for_each(|(co, dst)| {
        for ni in 0..n {
            let g = &grad_out[(ni * cout + co) * plane..][..plane];
            for ci in 0..cin {
                let src = &input[(ni * cin + ci) * plane..][..plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let mut acc = 0.0;
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for x in 0..w {
                                let sx = x as isize + dx;
                                if sx >= 0 && sx < w as isize {
                                    acc += g[y * w + x] * src[sy as usize * w + sx as usize];
                                }
                            }
                        }
                        dst[(ci * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
    let gb = (0..cout)
        .map(|co| {
            (0..n)
                .map(|ni| grad_out[(ni * cout + co) * plane..][..plane].iter().sum::<f64>())
                .sum()
        })
        .collect();
    (gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window correlation with explicit zero padding.
    fn oracle_forward(x: &Tensor4, layer: &ConvLayer) -> Vec<f64> {
        let [n, cin, h, w] = x.dims();
        let k = layer.kernel();
        let p = (k / 2) as i64;
        let mut out = Vec::new();
        for ni in 0..n {
            for co in 0..layer.out_channels() {
                for y in 0..h as i64 {
                    for xx in 0..w as i64 {
                        let mut acc = layer.bias()[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..k as i64 {
                                for kx in 0..k as i64 {
                                    let sy = y + ky - p;
                                    let sx = xx + kx - p;
                                    let v = if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                        0.0
                                    } else {
                                        x.get(ni, ci, sy as usize, sx as usize) as f64
                                    };
                                    let wi = layer.weight_index(co, ci, ky as usize, kx as usize);
                                    acc += layer.weight()[wi] as f64 * v;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_1x1_is_identity() {
        let mut rng = Rng::new(5);
        let x = Tensor4::random_normal([2, 3, 4, 5], &mut rng, 1.0);
        let y = conv2d_forward(&x, &ConvLayer::identity(3, 1).unwrap()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn ones_kernel_on_2x2() {
        let x = Tensor4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let layer = ConvLayer::new(1, 1, 3, vec![1.0; 9], vec![0.0]).unwrap();
        let y = conv2d_forward(&x, &layer).unwrap();
        let oracle = oracle_forward(&x, &layer);
        // every 3×3 window over a padded 2×2 grid covers all four cells
        assert_eq!(oracle, vec![10.0; 4]);
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = Rng::new(1);
        let mut layer = ConvLayer::init_uniform(2, 3, 3, &mut rng).unwrap();
        layer.bias_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let y = conv2d_forward(&Tensor4::zeros([1, 2, 3, 3]), &layer).unwrap();
        for c in 0..3 {
            assert!(y.plane(0, c).iter().all(|&v| v == layer.bias()[c]));
        }
    }

    #[test]
    fn matches_oracle_on_random_layers() {
        let mut rng = Rng::new(11);
        for &k in &[1, 3] {
            for _ in 0..5 {
                let x = Tensor4::random_normal([2, 3, 4, 5], &mut rng, 1.0);
                let layer = ConvLayer::init_uniform(3, 2, k, &mut rng).unwrap();
                let y = conv2d_forward(&x, &layer).unwrap();
                for (a, b) in y.data().iter().zip(oracle_forward(&x, &layer)) {
                    assert!((*a as f64 - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn linear_in_input() {
        let mut rng = Rng::new(2);
        let mut layer = ConvLayer::init_uniform(2, 2, 3, &mut rng).unwrap();
        layer.bias_mut().fill(0.0);
        let x = Tensor4::random_normal([1, 2, 5, 5], &mut rng, 1.0);
        let y = Tensor4::random_normal([1, 2, 5, 5], &mut rng, 1.0);
        let (a, b) = (1.7f32, -0.6f32);
        let lhs = conv2d_forward(&x.scale(a).unwrap().axpy(b, &y).unwrap(), &layer).unwrap();
        let rhs = conv2d_forward(&x, &layer)
            .unwrap()
            .scale(a)
            .unwrap()
            .axpy(b, &conv2d_forward(&y, &layer).unwrap())
            .unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            assert!((p - q).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(3);
        let layer = ConvLayer::init_uniform(2, 3, 3, &mut rng).unwrap();
        let x = Tensor4::random_normal([1, 2, 3, 3], &mut rng, 1.0);
        let (gx, gl) = conv2d_backward(&x, &layer, &Tensor4::zeros([1, 3, 3, 3])).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gl.weight().iter().chain(gl.bias()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_backward_passes_gradient_through() {
        let mut rng = Rng::new(4);
        let x = Tensor4::random_normal([1, 3, 2, 2], &mut rng, 1.0);
        let g = Tensor4::random_normal([1, 3, 2, 2], &mut rng, 1.0);
        let (gx, _) = conv2d_backward(&x, &ConvLayer::identity(3, 1).unwrap(), &g).unwrap();
        assert_eq!(gx, g);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let layer = ConvLayer::identity(3, 1).unwrap();
        assert!(conv2d_forward(&Tensor4::zeros([1, 2, 2, 2]), &layer).is_err());
        assert!(conv2d_backward(&Tensor4::zeros([1, 3, 2, 2]), &layer, &Tensor4::zeros([1, 3, 2, 1])).is_err());
        assert!(ConvLayer::zeros(2, 2, 5).is_err());
    }
}

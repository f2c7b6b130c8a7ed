mod common;

use common::{central_diff, conv_oracle, rel_err, to_f64, OracleLayer};
use distillkit::{conv2d_backward, conv2d_forward, ConvLayer, Rng, Tensor4};

#[test]
fn all_ones_kernel_on_two_by_two() {
    // with padding 1 every output window covers the whole 2×2 input
    let x = Tensor4::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
    let layer = ConvLayer::new(1, 1, 3, vec![1.0; 9], vec![0.0]).unwrap();
    let y = conv2d_forward(&x, &layer).unwrap();
    let oracle = conv_oracle(&to_f64(x.data()), x.dims(), &[1.0; 9], &[0.0], 1, 3);
    assert_eq!(oracle, vec![10.0; 4]);
    assert_eq!(to_f64(y.data()), oracle);
}

#[test]
fn forward_matches_sliding_window_oracle() {
    let mut rng = Rng::new(3);
    for (i, k) in [1usize, 3, 3, 1, 3].into_iter().enumerate() {
        let dims = [1 + i % 2, 2 + i % 3, 3 + i, 4];
        let x = Tensor4::random_normal(dims, &mut rng, 1.0);
        let layer = ConvLayer::init_uniform(dims[1], 3, k, &mut rng).unwrap();
        let y = conv2d_forward(&x, &layer).unwrap();
        let o = OracleLayer::from(&layer).apply(&to_f64(x.data()), dims);
        for (a, b) in y.data().iter().zip(&o) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}

#[test]
fn backward_matches_finite_differences_of_oracle() {
    let mut rng = Rng::new(8);
    let dims = [1, 2, 3, 3];
    let x = Tensor4::random_normal(dims, &mut rng, 1.0);
    let layer = ConvLayer::init_uniform(2, 2, 3, &mut rng).unwrap();
    let o = OracleLayer::from(&layer);
    // scalar loss: weighted sum of outputs, so every output gets a distinct gradient
    let weights: Vec<f64> = (0..18).map(|i| 0.1 * i as f64 - 0.7).collect();
    let loss = |y: &[f64]| y.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
    let grad_out = Tensor4::new([1, 2, 3, 3], weights.iter().map(|&v| v as f32).collect()).unwrap();
    let (gx, gl) = conv2d_backward(&x, &layer, &grad_out).unwrap();

    let nx = central_diff(|v| loss(&o.apply(v, dims)), &to_f64(x.data()), 1e-6);
    for (a, n) in gx.data().iter().zip(&nx) {
        assert!(rel_err(*a as f64, *n) < 1e-3);
    }
    let np = central_diff(|p| loss(&o.with_params(p).apply(&to_f64(x.data()), dims)), &o.params(), 1e-6);
    for (i, n) in np.iter().enumerate() {
        assert!(rel_err(gl.param(i) as f64, *n) < 1e-3, "param {i}");
    }
}

#[test]
fn rejects_bad_layers_and_inputs() {
    assert!(ConvLayer::new(1, 1, 2, vec![0.0; 4], vec![0.0]).is_err());
    assert!(ConvLayer::new(1, 1, 3, vec![0.0; 8], vec![0.0]).is_err());
    assert!(ConvLayer::new(1, 1, 1, vec![f32::NAN], vec![0.0]).is_err());
    let layer = ConvLayer::zeros(3, 1, 3).unwrap();
    assert!(conv2d_forward(&Tensor4::zeros([1, 2, 2, 2]), &layer).is_err());
}

#[test]
fn identity_layer_is_a_no_op() {
    let mut rng = Rng::new(1);
    let x = Tensor4::random_normal([2, 3, 4, 5], &mut rng, 1.0);
    for k in [1, 3] {
        assert_eq!(conv2d_forward(&x, &ConvLayer::identity(3, k).unwrap()).unwrap(), x);
    }
}

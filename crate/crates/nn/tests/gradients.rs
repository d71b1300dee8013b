//! Independent oracles for the engine: direct-loop convolutions and central
//! finite differences against every layer's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vocseg_nn::{
    BatchNorm2d, Conv2d, ConvTranspose2d, Layer, MaxPool2d, Mode, ParamRole, Relu, ResNet, Tensor,
};

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn randomize_params(layer: &mut dyn Layer, rng: &mut ChaCha8Rng) {
    for p in layer.params_mut() {
        p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.5f32..0.5));
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_conv(x: &Tensor, w: &[f32], b: &[f32], out_c: usize, k: usize, s: usize, p: usize) -> Vec<f32> {
    let [n, c, h, wd] = x.shape();
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (wd + 2 * p - k) / s + 1;
    let mut out = vec![0.0f32; n * out_c * oh * ow];
    for i in 0..n {
        for co in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.get(co).copied().unwrap_or(0.0);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[((i * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w[((co * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[((i * out_c + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn direct_conv_transpose(
    x: &Tensor,
    w: &[f32],
    b: &[f32],
    out_c: usize,
    k: usize,
    s: usize,
    p: usize,
    op: usize,
) -> (Vec<f32>, usize, usize) {
    let [n, c, h, wd] = x.shape();
    let oh = (h - 1) * s + k + op - 2 * p;
    let ow = (wd - 1) * s + k + op - 2 * p;
    let mut out = vec![0.0f32; n * out_c * oh * ow];
    for i in 0..n {
        for co in 0..out_c {
            let plane = &mut out[(i * out_c + co) * oh * ow..(i * out_c + co + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = b.get(co).copied().unwrap_or(0.0));
            for ci in 0..c {
                for iy in 0..h {
                    for ix in 0..wd {
                        let v = x.data()[((i * c + ci) * h + iy) * wd + ix];
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (iy * s + ky) as isize - p as isize;
                                let xx = (ix * s + kx) as isize - p as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < oh && (xx as usize) < ow {
                                    plane[y as usize * ow + xx as usize] += v * w[((ci * out_c + co) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

fn assert_close(got: &[f32], want: &[f32], tol: f32) {
    assert_eq!(got.len(), want.len());
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        assert!((a - b).abs() <= tol * (1.0 + b.abs()), "index {i}: {a} vs {b}");
    }
}

#[test]
fn conv_forward_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (c, oc, k, s, p, h, w, bias) in [
        (3, 4, 3, 2, 1, 9, 8, true),
        (2, 3, 3, 1, 1, 5, 5, false),
        (2, 5, 1, 1, 0, 4, 3, true),
        (3, 2, 7, 2, 3, 11, 11, false),
        (2, 2, 1, 2, 0, 6, 6, true),
    ] {
        let mut conv = Conv2d::new("c", c, oc, k, s, p, bias);
        randomize_params(&mut conv, &mut rng);
        let x = random_tensor([2, c, h, w], &mut rng);
        let y = conv.forward(&x, Mode::Eval).unwrap();
        let b = conv.bias.as_ref().map(|b| b.value.clone()).unwrap_or_default();
        assert_close(y.data(), &direct_conv(&x, &conv.weight.value, &b, oc, k, s, p), 1e-5);
    }
}

#[test]
fn conv_transpose_forward_matches_direct_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (c, oc, k, s, p, op, h) in [(3, 2, 3, 2, 1, 1, 4), (2, 3, 2, 2, 0, 0, 3), (4, 2, 3, 1, 1, 0, 5), (2, 2, 3, 2, 1, 0, 3)] {
        let mut deconv = ConvTranspose2d::new("d", c, oc, k, s, p, op, true);
        randomize_params(&mut deconv, &mut rng);
        let x = random_tensor([2, c, h, h + 1], &mut rng);
        let y = deconv.forward(&x, Mode::Eval).unwrap();
        let (want, oh, ow) = direct_conv_transpose(&x, &deconv.weight.value, &deconv.bias.as_ref().unwrap().value, oc, k, s, p, op);
        assert_eq!(y.shape(), [2, oc, oh, ow]);
        assert_close(y.data(), &want, 1e-5);
    }
}

/// Central-difference check of input and parameter gradients for the scalar
/// loss `sum(r * layer(x))` with a fixed random `r`.
///
/// Coordinates whose one-sided differences disagree sit on a ReLU or max-pool
/// kink within one step; those are skipped, but most must be checkable.
fn check_gradients(layer: &mut dyn Layer, x: &Tensor, rng: &mut ChaCha8Rng, eps: f32, tol: f64) {
    let y = layer.forward(x, Mode::Train).unwrap();
    let r = random_tensor(y.shape(), rng);
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let dx = layer.backward(&r).unwrap();
    let loss = |layer: &mut dyn Layer, x: &Tensor| -> f64 {
        let y = layer.forward(x, Mode::Train).unwrap();
        layer.clear_cache();
        y.data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
    };
    let base = loss(layer, x);
    let (mut checked, mut skipped) = (0usize, 0usize);
    let mut compare = |what: String, analytic: f64, up: f64, down: f64| {
        let e = eps as f64;
        let (fwd, bwd) = ((up - base) / e, (base - down) / e);
        if (fwd - bwd).abs() > tol * (1.0 + fwd.abs().max(bwd.abs())) {
            skipped += 1;
            return;
        }
        checked += 1;
        let numeric = (up - down) / (2.0 * e);
        assert!(
            (analytic - numeric).abs() <= tol * (1.0 + numeric.abs()),
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    };

    for idx in (0..x.len()).step_by((x.len() / 23).max(1)) {
        let mut plus = x.clone();
        plus.data_mut()[idx] += eps;
        let mut minus = x.clone();
        minus.data_mut()[idx] -= eps;
        let (up, down) = (loss(layer, &plus), loss(layer, &minus));
        compare(format!("input[{idx}]"), dx.data()[idx] as f64, up, down);
    }

    let grads: Vec<(String, Vec<f32>)> = layer.params().iter().map(|p| (p.name.clone(), p.grad().to_vec())).collect();
    for (pi, (name, grad)) in grads.iter().enumerate() {
        for idx in (0..grad.len()).step_by((grad.len() / 11).max(1)) {
            let shift = |layer: &mut dyn Layer, delta: f32| {
                layer.params_mut()[pi].value[idx] += delta;
            };
            shift(layer, eps);
            let up = loss(layer, x);
            shift(layer, -2.0 * eps);
            let down = loss(layer, x);
            shift(layer, eps);
            compare(format!("{name}[{idx}]"), grad[idx] as f64, up, down);
        }
    }
    assert!(skipped * 3 <= checked, "too many kinks: {skipped} skipped, {checked} checked");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (k, s, p) in [(3, 2, 1), (3, 1, 1), (1, 1, 0)] {
        let mut conv = Conv2d::new("c", 2, 3, k, s, p, true);
        randomize_params(&mut conv, &mut rng);
        let x = random_tensor([2, 2, 6, 5], &mut rng);
        check_gradients(&mut conv, &x, &mut rng, 1e-2, 1e-2);
    }
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, s, p, op) in [(3, 2, 1, 1), (2, 2, 0, 0), (3, 1, 1, 0)] {
        let mut deconv = ConvTranspose2d::new("d", 3, 2, k, s, p, op, true);
        randomize_params(&mut deconv, &mut rng);
        let x = random_tensor([2, 3, 3, 4], &mut rng);
        check_gradients(&mut deconv, &x, &mut rng, 1e-2, 1e-2);
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bn = BatchNorm2d::new("bn", 3);
    randomize_params(&mut bn, &mut rng);
    let x = random_tensor([3, 3, 2, 3], &mut rng);
    check_gradients(&mut bn, &x, &mut rng, 1e-2, 1e-2);
}

#[test]
fn relu_and_pool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Distinct values at least 0.05 apart and away from zero: no kink lies
    // within one finite-difference step.
    let len = 2 * 2 * 6 * 6;
    let mut values: Vec<f32> = (0..len).map(|i| (i as f32 - len as f32 / 2.0 + 0.5) * 0.05).collect();
    for i in (1..len).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec([2, 2, 6, 6], values).unwrap();
    check_gradients(&mut Relu::new(), &x, &mut rng, 1e-2, 1e-2);
    check_gradients(&mut MaxPool2d::new(2, 2, 0), &x, &mut rng, 1e-2, 1e-2);
    check_gradients(&mut MaxPool2d::new(3, 2, 1), &x, &mut rng, 1e-2, 1e-2);
}

#[test]
fn residual_stack_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = ResNet::with_blocks("bb", [1, 1, 0, 0]);
    randomize_params(&mut net, &mut rng);
    // Normalization scales near zero make the loss surface too curved for a
    // finite-difference step; keep them in a realistic band.
    for p in net.params_mut().into_iter().filter(|p| p.role == ParamRole::NormScale) {
        p.value.iter_mut().for_each(|v| *v += 1.0);
    }
    let x = random_tensor([2, 3, 20, 20], &mut rng);
    // Stacked normalizations add curvature, so the central difference is coarser.
    check_gradients(&mut net, &x, &mut rng, 1e-2, 5e-2);
}

#[test]
fn resnet34_features_have_stride_32_and_512_channels() {
    let mut net = ResNet::resnet34("backbone");
    let y = net.forward(&Tensor::full([1, 3, 224, 224], 0.5), Mode::Eval).unwrap();
    assert_eq!(y.shape(), [1, 512, 7, 7]);
}


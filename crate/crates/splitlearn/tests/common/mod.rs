//! Shared test oracles: a naive 7-loop convolution reference and central
//! finite differences. Everything here is independent of the kernel
//! implementations it checks.

#![allow(dead_code)]

pub mod gradcheck;

use splitlearn::tensor::{Real, Rng, TensorOf};

/// Literal-definition cross-correlation. Seven nested loops, bounds checked
/// per element; deliberately shares nothing with the production kernel.
pub fn naive_conv2d<S: Real>(
    input: &TensorOf<S>,
    weight: &TensorOf<S>,
    bias: &TensorOf<S>,
    stride: usize,
    pad: usize,
) -> TensorOf<S> {
    let (n, c_in, h, w) = match *input.shape() {
        [n, c, h, w] => (n, c, h, w),
        _ => panic!("naive_conv2d: rank-4 input"),
    };
    let (c_out, _, k, _) = match *weight.shape() {
        [co, ci, kh, kw] => {
            assert_eq!(ci, c_in);
            assert_eq!(kh, kw);
            (co, ci, kh, kw)
        }
        _ => panic!("naive_conv2d: rank-4 weight"),
    };
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = TensorOf::zeros(&[n, c_out, oh, ow]);
    for ni in 0..n {
        for co in 0..c_out {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = bias.data()[co];
                    for ci in 0..c_in {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = ohi * stride + kh;
                                let iw = owi * stride + kw;
                                if ih < pad || iw < pad {
                                    continue;
                                }
                                let (ih, iw) = (ih - pad, iw - pad);
                                if ih >= h || iw >= w {
                                    continue;
                                }
                                let x = input.data()[((ni * c_in + ci) * h + ih) * w + iw];
                                let wv =
                                    weight.data()[((co * c_in + ci) * k + kh) * k + kw];
                                acc = acc + x * wv;
                            }
                        }
                    }
                    out.data_mut()[((ni * c_out + co) * oh + ohi) * ow + owi] = acc;
                }
            }
        }
    }
    out
}

pub fn uniform_tensor<S: Real>(shape: &[usize], rng: &mut Rng) -> TensorOf<S> {
    TensorOf::from_fn(shape, |_| S::from_f64(rng.next_symmetric(1.0)))
}

/// Uniform values pushed away from zero so an FD step cannot cross the ReLU
/// kink.
pub fn uniform_tensor_relu_safe<S: Real>(shape: &[usize], rng: &mut Rng) -> TensorOf<S> {
    TensorOf::from_fn(shape, |_| {
        let v = rng.next_symmetric(1.0);
        let v = if v >= 0.0 { v + 0.05 } else { v - 0.05 };
        S::from_f64(v)
    })
}

/// Every 2×2 pooling window gets four well-separated levels (gap ≥ 0.4) in a
/// random order, so finite differences never flip the argmax.
pub fn pool_safe_tensor<S: Real>(shape: &[usize], rng: &mut Rng) -> TensorOf<S> {
    let [n, c, h, w] = *shape else {
        panic!("pool_safe_tensor: rank-4 shape")
    };
    let mut t = TensorOf::zeros(shape);
    for plane in 0..n * c {
        for bh in 0..h / 2 {
            for bw in 0..w / 2 {
                let mut levels = [-0.75, -0.25, 0.25, 0.75];
                rng.shuffle(&mut levels);
                for (j, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let idx = plane * h * w + (2 * bh + dy) * w + 2 * bw + dx;
                    t.data_mut()[idx] =
                        S::from_f64(levels[j] + rng.next_symmetric(0.05));
                }
            }
        }
        // Rows/columns outside complete windows (odd extents) can be anything.
        for hi in (h / 2) * 2..h {
            for wi in 0..w {
                t.data_mut()[plane * h * w + hi * w + wi] = S::from_f64(rng.next_symmetric(1.0));
            }
        }
        for hi in 0..h {
            for wi in (w / 2) * 2..w {
                t.data_mut()[plane * h * w + hi * w + wi] = S::from_f64(rng.next_symmetric(1.0));
            }
        }
    }
    t
}

/// ⟨a, b⟩ accumulated in f64.
pub fn dot<S: Real>(a: &TensorOf<S>, b: &TensorOf<S>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x.to_f64() * y.to_f64())
        .sum()
}

/// Relative error with a unit floor (inputs are unit scale, so gradients are
/// O(1); the floor keeps near-zero entries from dividing by nothing).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central finite differences of `loss(x) = Σ cotangent ⊙ f(x)` against the
/// analytic gradient, one coordinate at a time. Returns the max relative
/// error over all coordinates.
pub fn fd_max_rel_error<S: Real>(
    x: &TensorOf<S>,
    cotangent: &TensorOf<S>,
    analytic: &TensorOf<S>,
    eps: f64,
    mut f: impl FnMut(&TensorOf<S>) -> TensorOf<S>,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + S::from_f64(eps);
        let plus = dot(&f(&probe), cotangent);
        probe.data_mut()[i] = orig - S::from_f64(eps);
        let minus = dot(&f(&probe), cotangent);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic.data()[i].to_f64(), numeric);
        if err > worst {
            worst = err;
        }
    }
    worst
}

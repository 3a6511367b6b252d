//! Randomized finite-difference driver used by the kernel tests and the
//! acceptance suite. Each call draws a small shape from the seed, runs one
//! kernel's analytic backward, and differences the forward numerically.

use splitlearn::ops;
use splitlearn::tensor::{Real, Rng, TensorOf};

use super::{fd_max_rel_error, pool_safe_tensor, uniform_tensor, uniform_tensor_relu_safe};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Conv,
    TransposedConv,
    Dense,
    Relu,
    Tanh,
    MaxPool,
    Upsample,
    SoftmaxXent,
}

pub const ALL_KERNELS: [Kernel; 8] = [
    Kernel::Conv,
    Kernel::TransposedConv,
    Kernel::Dense,
    Kernel::Relu,
    Kernel::Tanh,
    Kernel::MaxPool,
    Kernel::Upsample,
    Kernel::SoftmaxXent,
];

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Conv => "conv2d",
            Kernel::TransposedConv => "transposed_conv2d",
            Kernel::Dense => "dense",
            Kernel::Relu => "relu",
            Kernel::Tanh => "tanh",
            Kernel::MaxPool => "maxpool2x2",
            Kernel::Upsample => "upsample2x_nearest",
            Kernel::SoftmaxXent => "softmax_cross_entropy",
        }
    }
}

/// Max relative error between analytic and central-difference gradients for
/// one kernel on one randomly drawn small shape.
pub fn max_rel_error<S: Real>(kernel: Kernel, seed: u64, eps: f64) -> f64 {
    let mut rng = Rng::new(seed).derive("gradcheck").derive(kernel.name());
    let n = 1 + rng.next_below(2) as usize;
    match kernel {
        Kernel::Conv => {
            let c_in = 1 + rng.next_below(3) as usize;
            let c_out = 1 + rng.next_below(3) as usize;
            let k = 1 + rng.next_below(3) as usize;
            let pad = rng.next_below(2) as usize;
            let stride = 1 + rng.next_below(2) as usize;
            let h = k.max(3) + rng.next_below(4) as usize;
            let w = k.max(3) + rng.next_below(4) as usize;
            let x: TensorOf<S> = uniform_tensor(&[n, c_in, h, w], &mut rng);
            let wt: TensorOf<S> = uniform_tensor(&[c_out, c_in, k, k], &mut rng);
            let b: TensorOf<S> = uniform_tensor(&[c_out], &mut rng);
            let out = ops::conv2d_forward(&x, &wt, &b, stride, pad).unwrap();
            let cot: TensorOf<S> = uniform_tensor(out.shape(), &mut rng);
            let (gi, gw, gb) = ops::conv2d_backward(&x, &wt, &cot, stride, pad).unwrap();
            let e1 = fd_max_rel_error(&x, &cot, &gi, eps, |p| {
                ops::conv2d_forward(p, &wt, &b, stride, pad).unwrap()
            });
            let e2 = fd_max_rel_error(&wt, &cot, &gw, eps, |p| {
                ops::conv2d_forward(&x, p, &b, stride, pad).unwrap()
            });
            let e3 = fd_max_rel_error(&b, &cot, &gb, eps, |p| {
                ops::conv2d_forward(&x, &wt, p, stride, pad).unwrap()
            });
            e1.max(e2).max(e3)
        }
        Kernel::TransposedConv => {
            let c_in = 1 + rng.next_below(3) as usize;
            let c_out = 1 + rng.next_below(3) as usize;
            let k = 2 + rng.next_below(2) as usize;
            let pad = rng.next_below(2) as usize;
            let stride = 1 + rng.next_below(2) as usize;
            let h = 2 + rng.next_below(4) as usize;
            let w = 2 + rng.next_below(4) as usize;
            let x: TensorOf<S> = uniform_tensor(&[n, c_in, h, w], &mut rng);
            let wt: TensorOf<S> = uniform_tensor(&[c_in, c_out, k, k], &mut rng);
            let b: TensorOf<S> = uniform_tensor(&[c_out], &mut rng);
            let out = ops::transposed_conv2d_forward(&x, &wt, &b, stride, pad).unwrap();
            let cot: TensorOf<S> = uniform_tensor(out.shape(), &mut rng);
            let (gi, gw, gb) =
                ops::transposed_conv2d_backward(&x, &wt, &cot, stride, pad).unwrap();
            let e1 = fd_max_rel_error(&x, &cot, &gi, eps, |p| {
                ops::transposed_conv2d_forward(p, &wt, &b, stride, pad).unwrap()
            });
            let e2 = fd_max_rel_error(&wt, &cot, &gw, eps, |p| {
                ops::transposed_conv2d_forward(&x, p, &b, stride, pad).unwrap()
            });
            let e3 = fd_max_rel_error(&b, &cot, &gb, eps, |p| {
                ops::transposed_conv2d_forward(&x, &wt, p, stride, pad).unwrap()
            });
            e1.max(e2).max(e3)
        }
        Kernel::Dense => {
            let d = 2 + rng.next_below(6) as usize;
            let u = 1 + rng.next_below(5) as usize;
            let x: TensorOf<S> = uniform_tensor(&[n, d], &mut rng);
            let wt: TensorOf<S> = uniform_tensor(&[d, u], &mut rng);
            let b: TensorOf<S> = uniform_tensor(&[u], &mut rng);
            let cot: TensorOf<S> = uniform_tensor(&[n, u], &mut rng);
            let (gi, gw, gb) = ops::dense_backward(&x, &wt, &cot).unwrap();
            let e1 = fd_max_rel_error(&x, &cot, &gi, eps, |p| {
                ops::dense_forward(p, &wt, &b).unwrap()
            });
            let e2 = fd_max_rel_error(&wt, &cot, &gw, eps, |p| {
                ops::dense_forward(&x, p, &b).unwrap()
            });
            let e3 = fd_max_rel_error(&b, &cot, &gb, eps, |p| {
                ops::dense_forward(&x, &wt, p).unwrap()
            });
            e1.max(e2).max(e3)
        }
        Kernel::Relu => {
            let c = 1 + rng.next_below(3) as usize;
            let h = 2 + rng.next_below(5) as usize;
            let x: TensorOf<S> = uniform_tensor_relu_safe(&[n, c, h, h], &mut rng);
            let cot: TensorOf<S> = uniform_tensor(x.shape(), &mut rng);
            let gi = ops::relu_backward(&x, &cot).unwrap();
            fd_max_rel_error(&x, &cot, &gi, eps, ops::relu_forward)
        }
        Kernel::Tanh => {
            let c = 1 + rng.next_below(3) as usize;
            let h = 2 + rng.next_below(5) as usize;
            let x: TensorOf<S> = uniform_tensor(&[n, c, h, h], &mut rng);
            let cot: TensorOf<S> = uniform_tensor(x.shape(), &mut rng);
            let y = ops::tanh_forward(&x);
            let gi = ops::tanh_backward(&y, &cot).unwrap();
            fd_max_rel_error(&x, &cot, &gi, eps, ops::tanh_forward)
        }
        Kernel::MaxPool => {
            let c = 1 + rng.next_below(3) as usize;
            let h = 2 * (1 + rng.next_below(3) as usize);
            let w = 2 * (1 + rng.next_below(3) as usize);
            let x: TensorOf<S> = pool_safe_tensor(&[n, c, h, w], &mut rng);
            let (out, argmax) = ops::maxpool2x2_forward(&x).unwrap();
            let cot: TensorOf<S> = uniform_tensor(out.shape(), &mut rng);
            let gi = ops::maxpool2x2_backward(x.shape(), &argmax, &cot).unwrap();
            fd_max_rel_error(&x, &cot, &gi, eps, |p| {
                ops::maxpool2x2_forward(p).unwrap().0
            })
        }
        Kernel::Upsample => {
            let c = 1 + rng.next_below(3) as usize;
            let h = 1 + rng.next_below(4) as usize;
            let w = 1 + rng.next_below(4) as usize;
            let x: TensorOf<S> = uniform_tensor(&[n, c, h, w], &mut rng);
            let out = ops::upsample2x_nearest_forward(&x).unwrap();
            let cot: TensorOf<S> = uniform_tensor(out.shape(), &mut rng);
            let gi = ops::upsample2x_nearest_backward(x.shape(), &cot).unwrap();
            fd_max_rel_error(&x, &cot, &gi, eps, |p| {
                ops::upsample2x_nearest_forward(p).unwrap()
            })
        }
        Kernel::SoftmaxXent => {
            let k = 2 + rng.next_below(6) as usize;
            let x: TensorOf<S> = uniform_tensor(&[n, k], &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.next_below(k as u64) as usize).collect();
            let (_, grad) = ops::softmax_cross_entropy(&x, &labels).unwrap();
            // The loss is already scalar; difference it directly.
            let mut worst = 0.0f64;
            let mut probe = x.clone();
            for i in 0..x.numel() {
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + S::from_f64(eps);
                let (lp, _) = ops::softmax_cross_entropy(&probe, &labels).unwrap();
                probe.data_mut()[i] = orig - S::from_f64(eps);
                let (lm, _) = ops::softmax_cross_entropy(&probe, &labels).unwrap();
                probe.data_mut()[i] = orig;
                let numeric = (lp.to_f64() - lm.to_f64()) / (2.0 * eps);
                let err = super::relative_error(grad.data()[i].to_f64(), numeric);
                worst = worst.max(err);
            }
            worst
        }
    }
}

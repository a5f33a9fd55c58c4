//! Convolution, pooling and upsampling with hand-derived backward passes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor3;

/// Stride-1 "same" convolution with an odd square kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal weights, zero bias.
    pub fn he_init<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        for w in &mut conv.weight {
            let z: f64 = rng.sample(StandardNormal);
            *w = z * std;
        }
        conv
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.out_channels, self.kernel)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels(), self.in_channels);
        let (h, w) = (x.height(), x.width());
        let pad = (self.kernel / 2) as isize;
        let mut out = Tensor3::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let plane = out.plane_mut(o);
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let src = x.plane(i);
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let wt = self.weight[self.widx(o, i, ky, kx)];
                        if wt == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(w, dx);
                        for y in valid_rows(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            let dst = &mut plane[y * w + x0..y * w + x1];
                            let s0 = (sy * w) as isize + x0 as isize + dx;
                            let srow = &src[s0 as usize..s0 as usize + (x1 - x0)];
                            for (d, s) in dst.iter_mut().zip(srow) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(&self, x: &Tensor3, grad_out: &Tensor3, grads: &mut Conv2d, want_input: bool) -> Option<Tensor3> {
        let (h, w) = (x.height(), x.width());
        let pad = (self.kernel / 2) as isize;
        let mut grad_in = want_input.then(|| Tensor3::zeros(self.in_channels, h, w));
        for o in 0..self.out_channels {
            let g = grad_out.plane(o);
            grads.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let src = x.plane(i);
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let wi = self.widx(o, i, ky, kx);
                        let wt = self.weight[wi];
                        let (x0, x1) = valid_range(w, dx);
                        let mut acc = 0.0;
                        for y in valid_rows(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                            let srow = &src[s0..s0 + (x1 - x0)];
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(gi) = grad_in.as_mut() {
                                let dst = &mut gi.plane_mut(i)[s0..s0 + (x1 - x0)];
                                for (d, gv) in dst.iter_mut().zip(grow) {
                                    *d += wt * gv;
                                }
                            }
                        }
                        grads.weight[wi] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

/// Output columns `x` for which `x + dx` stays inside `[0, w)`.
#[inline]
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)).max(0) as usize;
    (x0.min(x1), x1)
}

#[inline]
fn valid_rows(h: usize, dy: isize) -> std::ops::Range<usize> {
    let (a, b) = valid_range(h, dy);
    a..b
}

pub fn relu(mut x: Tensor3) -> Tensor3 {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Tensor3, mut grad: Tensor3) -> Tensor3 {
    for (g, &o) in grad.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

/// 2x2 average pooling; spatial sizes must be even.
pub fn avg_pool2(x: &Tensor3) -> Tensor3 {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[(2 * y) * w + 2 * xx];
                let b = src[(2 * y) * w + 2 * xx + 1];
                let d = src[(2 * y + 1) * w + 2 * xx];
                let e = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = 0.25 * (a + b + d + e);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &Tensor3) -> Tensor3 {
    let (c, oh, ow) = grad.shape();
    let w = ow * 2;
    let mut out = Tensor3::zeros(c, oh * 2, w);
    for ch in 0..c {
        let g = grad.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..oh * 2 {
            for x in 0..w {
                dst[y * w + x] = 0.25 * g[(y / 2) * ow + x / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor3) -> Tensor3 {
    let (c, h, w) = x.shape();
    let ow = w * 2;
    let mut out = Tensor3::zeros(c, h * 2, ow);
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h * 2 {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Tensor3) -> Tensor3 {
    let (c, h, w) = grad.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    for ch in 0..c {
        let g = grad.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                dst[(y / 2) * ow + x / 2] += g[y * w + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor3::from_vec(c, h, w, data).unwrap()
    }

    /// Direct per-pixel convolution used as an oracle for the row-sliced loop.
    fn naive_conv(conv: &Conv2d, x: &Tensor3) -> Tensor3 {
        let (h, w) = (x.height() as isize, x.width() as isize);
        let pad = (conv.kernel / 2) as isize;
        let mut out = Tensor3::zeros(conv.out_channels, h as usize, w as usize);
        for o in 0..conv.out_channels {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = conv.bias[o];
                    for i in 0..conv.in_channels {
                        for ky in 0..conv.kernel as isize {
                            for kx in 0..conv.kernel as isize {
                                let sy = y + ky - pad;
                                let sx = xx + kx - pad;
                                if sy < 0 || sx < 0 || sy >= h || sx >= w {
                                    continue;
                                }
                                acc += conv.weight[conv.widx(o, i, ky as usize, kx as usize)]
                                    * x.get(i, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(o, y as usize, xx as usize, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kernel in [1, 3] {
            let mut conv = Conv2d::he_init(2, 3, kernel, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3];
            let x = random_tensor(2, 5, 4, 2);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x) - b, g> = <x, dconv^T g> and = <W, dW> for the weight part.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::he_init(2, 3, 3, &mut rng);
        let x = random_tensor(2, 4, 6, 4);
        let g = random_tensor(3, 4, 6, 5);
        let mut grads = conv.zeros_like();
        let gx = conv.backward(&x, &g, &mut grads, true).unwrap();
        let y = conv.forward(&x);
        let lhs: f64 = (0..3)
            .map(|o| {
                y.plane(o)
                    .iter()
                    .zip(g.plane(o))
                    .map(|(a, b)| (a - conv.bias[o]) * b)
                    .sum::<f64>()
            })
            .sum();
        let via_input: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        let via_weight: f64 = conv.weight.iter().zip(&grads.weight).map(|(a, b)| a * b).sum();
        assert!((lhs - via_input).abs() < 1e-10);
        assert!((lhs - via_weight).abs() < 1e-10);
        let bias_sum: f64 = g.plane(1).iter().sum();
        assert!((grads.bias[1] - bias_sum).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = random_tensor(2, 4, 6, 6);
        let g = random_tensor(2, 2, 3, 7);
        let lhs: f64 = avg_pool2(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(avg_pool2_backward(&g).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let lhs: f64 = upsample2(&g).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.data().iter().zip(upsample2_backward(&x).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn relu_masks_gradient() {
        let out = relu(Tensor3::from_vec(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&out, Tensor3::filled(1, 1, 3, 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }
}

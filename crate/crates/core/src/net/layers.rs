//! Building blocks of the keypoint network: strided/padded 2-D convolution
//! via im2col + GEMM, batch normalization, ReLU and nearest-neighbor
//! upsampling, each with an analytic backward pass.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
#[cfg(test)]
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Normalization mode: batch statistics (training) or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// (out_ch, in_ch, kh, kw)
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f32;
        let dist = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).unwrap();
        let weight =
            Array4::from_shape_simple_fn((out_ch, in_ch, kernel, kernel), || dist.sample(rng));
        Conv2d {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.shape()[2];
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    /// im2col with layout (in_ch*k*k, out_h*out_w).
    fn im2col(&self, x: &ArrayView3<f32>) -> Array2<f32> {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.weight.shape()[2];
        let (oh, ow) = self.out_size(h, w);
        let mut col = Array2::<f32>::zeros((c_in * k * k, oh * ow));
        {
            let xs = x.as_slice().expect("contiguous input");
            let cs = col.as_slice_mut().unwrap();
            for c in 0..c_in {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (c * k + ki) * k + kj;
                        let base = row * oh * ow;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = (c * h + iy as usize) * w;
                            let dst = base + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    cs[dst + ox] = xs[src + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &Array2<f32>, c_in: usize, h: usize, w: usize) -> Array3<f32> {
        let k = self.weight.shape()[2];
        let (oh, ow) = self.out_size(h, w);
        let mut dx = Array3::<f32>::zeros((c_in, h, w));
        {
            let ds = dcol.as_slice().expect("contiguous dcol");
            let xs = dx.as_slice_mut().unwrap();
            for c in 0..c_in {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (c * k + ki) * k + kj;
                        let base = row * oh * ow;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = (c * h + iy as usize) * w;
                            let src = base + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    xs[dst + ix as usize] += ds[src + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &ArrayView4<f32>) -> Array4<f32> {
        let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert_eq!(c_in, self.weight.shape()[1]);
        let o = self.weight.shape()[0];
        let k = self.weight.shape()[2];
        let (oh, ow) = self.out_size(h, w);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((o, c_in * k * k))
            .unwrap();
        let mut out = Array4::<f32>::zeros((n, o, oh, ow));
        for i in 0..n {
            let col = self.im2col(&x.index_axis(Axis(0), i));
            let mut y = w_mat.dot(&col); // (o, oh*ow)
            for (mut row, b) in y.outer_iter_mut().zip(self.bias.iter()) {
                row += *b;
            }
            out.index_axis_mut(Axis(0), i)
                .assign(&y.into_shape_with_order((o, oh, ow)).unwrap());
        }
        out
    }

    /// Returns (dx, dw, db). `x` is the forward input (im2col recomputed).
    pub fn backward(
        &self,
        x: &ArrayView4<f32>,
        dout: &ArrayView4<f32>,
    ) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
        let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let o = self.weight.shape()[0];
        let k = self.weight.shape()[2];
        let (oh, ow) = self.out_size(h, w);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((o, c_in * k * k))
            .unwrap();
        let mut dw = Array2::<f32>::zeros((o, c_in * k * k));
        let mut db = Array1::<f32>::zeros(o);
        let mut dx = Array4::<f32>::zeros((n, c_in, h, w));
        for i in 0..n {
            let col = self.im2col(&x.index_axis(Axis(0), i));
            let dy = dout.index_axis(Axis(0), i);
            let dy_mat = dy.into_shape_with_order((o, oh * ow)).unwrap();
            dw += &dy_mat.dot(&col.t());
            db += &dy_mat.sum_axis(Axis(1));
            let dcol = w_mat.t().dot(&dy_mat);
            dx.index_axis_mut(Axis(0), i)
                .assign(&self.col2im(&dcol, c_in, h, w));
        }
        let dw = dw.into_shape_with_order((o, c_in, k, k)).unwrap();
        (dx, dw, db)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
}

/// Saved values needed for the batch-norm backward pass.
pub struct BnCache {
    pub x_hat: Array4<f32>,
    pub inv_std: Array1<f32>,
    pub mean: Array1<f32>,
    pub mode: Mode,
}

impl BatchNorm2d {
    pub fn new(ch: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(ch),
            beta: Array1::zeros(ch),
            running_mean: Array1::zeros(ch),
            running_var: Array1::ones(ch),
        }
    }

    pub fn forward(&mut self, x: &ArrayView4<f32>, mode: Mode) -> (Array4<f32>, BnCache) {
        let c = x.shape()[1];
        let m = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f32;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::<f32>::zeros(c);
                let mut var = Array1::<f32>::zeros(c);
                for ch in 0..c {
                    let xc = x.index_axis(Axis(1), ch);
                    let mu = xc.sum() / m;
                    mean[ch] = mu;
                    var[ch] = xc.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / m;
                }
                for ch in 0..c {
                    self.running_mean[ch] =
                        (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean[ch];
                    self.running_var[ch] =
                        (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * var[ch];
                }
                (mean, var)
            }
            Mode::Infer => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut x_hat = x.to_owned();
        let mut y = Array4::<f32>::zeros(x.raw_dim());
        for ch in 0..c {
            let mu = mean[ch];
            let is = inv_std[ch];
            let g = self.gamma[ch];
            let b = self.beta[ch];
            let mut xh = x_hat.index_axis_mut(Axis(1), ch);
            xh.mapv_inplace(|v| (v - mu) * is);
            let mut yc = y.index_axis_mut(Axis(1), ch);
            yc.assign(&xh);
            yc.mapv_inplace(|v| g * v + b);
        }
        (
            y,
            BnCache {
                x_hat,
                inv_std,
                mean,
                mode,
            },
        )
    }

    /// Inference-only forward without cache allocation.
    pub fn forward_infer(&self, x: &mut Array4<f32>) {
        let c = x.shape()[1];
        for ch in 0..c {
            let mu = self.running_mean[ch];
            let is = 1.0 / (self.running_var[ch] + BN_EPS).sqrt();
            let g = self.gamma[ch];
            let b = self.beta[ch];
            x.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| g * (v - mu) * is + b);
        }
    }

    /// Returns (dx, dgamma, dbeta).
    pub fn backward(
        &self,
        cache: &BnCache,
        dout: &ArrayView4<f32>,
    ) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
        let c = dout.shape()[1];
        let m = (dout.shape()[0] * dout.shape()[2] * dout.shape()[3]) as f32;
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        let mut dx = Array4::<f32>::zeros(dout.raw_dim());
        for ch in 0..c {
            let dy = dout.index_axis(Axis(1), ch);
            let xh = cache.x_hat.index_axis(Axis(1), ch);
            let g = self.gamma[ch];
            let is = cache.inv_std[ch];
            dgamma[ch] = dy.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            dbeta[ch] = dy.sum();
            let mut dxc = dx.index_axis_mut(Axis(1), ch);
            match cache.mode {
                Mode::Train => {
                    let sum_dy = dbeta[ch];
                    let sum_dy_xh = dgamma[ch];
                    azip_dx(&mut dxc, &dy, &xh, |dyv, xhv| {
                        g * is * (dyv - sum_dy / m - xhv * sum_dy_xh / m)
                    });
                }
                Mode::Infer => {
                    azip_dx(&mut dxc, &dy, &xh, |dyv, _| g * is * dyv);
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

fn azip_dx(
    dx: &mut ndarray::ArrayViewMut3<f32>,
    dy: &ndarray::ArrayView3<f32>,
    xh: &ndarray::ArrayView3<f32>,
    f: impl Fn(f32, f32) -> f32,
) {
    ndarray::Zip::from(dx)
        .and(dy)
        .and(xh)
        .for_each(|d, &a, &b| *d = f(a, b));
}

pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(activation: &Array4<f32>, dout: &Array4<f32>) -> Array4<f32> {
    let mut dx = dout.clone();
    ndarray::Zip::from(&mut dx)
        .and(activation)
        .for_each(|d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
    dx
}

/// Nearest-neighbor x2 upsampling.
pub fn upsample2(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Array4::<f32>::zeros((n, c, h * 2, w * 2));
    for i in 0..n {
        for ch in 0..c {
            for yy in 0..h * 2 {
                for xx in 0..w * 2 {
                    y[[i, ch, yy, xx]] = x[[i, ch, yy / 2, xx / 2]];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(dout: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = (
        dout.shape()[0],
        dout.shape()[1],
        dout.shape()[2],
        dout.shape()[3],
    );
    let mut dx = Array4::<f32>::zeros((n, c, h2 / 2, w2 / 2));
    for i in 0..n {
        for ch in 0..c {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dx[[i, ch, yy / 2, xx / 2]] += dout[[i, ch, yy, xx]];
                }
            }
        }
    }
    dx
}

/// Deterministic He-normal initialization helper used by tests.
#[cfg(test)]
pub fn randn_like(shape: (usize, usize, usize, usize), std: f32, rng: &mut ChaCha8Rng) -> Array4<f32> {
    let dist = Normal::new(0.0f32, std).unwrap();
    Array4::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Uniform array in [lo, hi), used by tests for random inputs.
#[cfg(test)]
pub fn rand_uniform4(
    shape: (usize, usize, usize, usize),
    lo: f32,
    hi: f32,
    rng: &mut ChaCha8Rng,
) -> Array4<f32> {
    Array4::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

//! Finite-difference gradient verification against independent f64
//! reference implementations of every layer. Exposed publicly so the
//! acceptance suite can re-run the checks through the crate API.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{relu, relu_backward, upsample2_backward, BatchNorm2d, Conv2d, Mode, BN_EPS};
use super::{heatmap_loss, soft_argmax_grad};

pub(crate) fn conv_ref(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut y = Array4::<f64>::zeros((n, o, oh, ow));
    for i in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[[i, ic, iy as usize, ix as usize]]
                                        * w[[oc, ic, ky, kx]];
                                }
                            }
                        }
                    }
                    y[[i, oc, oy, ox]] = acc;
                }
            }
        }
    }
    y
}

/// Batch-statistics normalization (training mode), biased variance.
pub(crate) fn bn_ref(x: &Array4<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array4<f64> {
    let c = x.shape()[1];
    let m = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64;
    let mut y = x.clone();
    for ch in 0..c {
        let sl = x.index_axis(Axis(1), ch);
        let mean = sl.sum() / m;
        let var = sl.mapv(|v| (v - mean) * (v - mean)).sum() / m;
        let inv = 1.0 / (var + BN_EPS as f64).sqrt();
        y.index_axis_mut(Axis(1), ch)
            .mapv_inplace(|v| (v - mean) * inv * gamma[ch] + beta[ch]);
    }
    y
}

pub(crate) fn relu_ref(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn upsample2_ref(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Array4::<f64>::zeros((n, c, h * 2, w * 2));
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

pub(crate) fn to_f64_4(a: &Array4<f32>) -> Array4<f64> {
    a.mapv(|v| v as f64)
}

pub(crate) fn to_f64_1(a: &Array1<f32>) -> Array1<f64> {
    a.mapv(|v| v as f64)
}

/// ||analytic - reference|| / max(||reference||, tiny).
pub(crate) fn rel_err(analytic: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    for (&a, &r) in analytic.iter().zip(reference) {
        diff2 += (a as f64 - r) * (a as f64 - r);
        ref2 += r * r;
    }
    (diff2 / ref2.max(1e-20)).sqrt()
}

/// Central finite differences of a scalar f64 objective.
fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        buf[i] = x[i] + eps;
        let fp = f(&buf);
        buf[i] = x[i] - eps;
        let fm = f(&buf);
        buf[i] = x[i];
        g.push((fp - fm) / (2.0 * eps));
    }
    g
}

fn randn4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f32> {
    let dist = Normal::new(0.0f32, 1.0).unwrap();
    Array4::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Per-layer maximum relative gradient error, (layer name, rel err).
pub fn check_all_layers() -> Vec<(String, f64)> {
    let mut results = Vec::new();

    // convolutions in every configuration the model uses
    for (name, in_ch, out_ch, k, stride, pad) in [
        ("conv3x3_stride2", 2usize, 3usize, 3usize, 2usize, 1usize),
        ("conv3x3_stride1", 3, 2, 3, 1, 1),
        ("conv1x1", 4, 3, 1, 1, 0),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(7 + k as u64 + stride as u64);
        let conv = Conv2d::new(in_ch, out_ch, k, stride, pad, &mut rng);
        let x = randn4((2, in_ch, 5, 6), &mut rng);
        let (oh, ow) = conv.out_size(5, 6);
        let dout = randn4((2, out_ch, oh, ow), &mut rng);
        let (dx, dw, db) = conv.backward(&x.view(), &dout.view());
        let r64 = to_f64_4(&dout);
        let (nw, nb, nx) = (conv.weight.len(), conv.bias.len(), x.len());
        let theta: Vec<f64> = to_f64_4(&conv.weight)
            .iter()
            .chain(to_f64_1(&conv.bias).iter())
            .chain(to_f64_4(&x).iter())
            .copied()
            .collect();
        let f = move |t: &[f64]| -> f64 {
            let w = Array4::from_shape_vec((out_ch, in_ch, k, k), t[..nw].to_vec()).unwrap();
            let b = Array1::from_vec(t[nw..nw + nb].to_vec());
            let x = Array4::from_shape_vec((2, in_ch, 5, 6), t[nw + nb..].to_vec()).unwrap();
            (conv_ref(&x, &w, &b, stride, pad) * r64.view()).sum()
        };
        let fd = fd_grad(&f, &theta, 1e-5);
        let analytic: Vec<f32> = dw
            .iter()
            .chain(db.iter())
            .chain(dx.iter())
            .copied()
            .collect();
        debug_assert_eq!(analytic.len(), nw + nb + nx);
        results.push((name.to_string(), rel_err(&analytic, &fd)));
    }

    // batch normalization, training mode
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bn = BatchNorm2d::new(3);
        bn.gamma = Array1::from_vec(vec![1.3, 0.7, 1.1]);
        bn.beta = Array1::from_vec(vec![0.2, -0.4, 0.05]);
        let x = randn4((2, 3, 4, 4), &mut rng);
        let dout = randn4((2, 3, 4, 4), &mut rng);
        let (_, cache) = bn.clone().forward(&x.view(), Mode::Train);
        let (dx, dg, dbb) = bn.backward(&cache, &dout.view());
        let r64 = to_f64_4(&dout);
        let nx = x.len();
        let theta: Vec<f64> = to_f64_4(&x)
            .iter()
            .chain(to_f64_1(&bn.gamma).iter())
            .chain(to_f64_1(&bn.beta).iter())
            .copied()
            .collect();
        let f = move |t: &[f64]| -> f64 {
            let x = Array4::from_shape_vec((2, 3, 4, 4), t[..nx].to_vec()).unwrap();
            let g = Array1::from_vec(t[nx..nx + 3].to_vec());
            let b = Array1::from_vec(t[nx + 3..].to_vec());
            (bn_ref(&x, &g, &b) * r64.view()).sum()
        };
        let fd = fd_grad(&f, &theta, 1e-6);
        let analytic: Vec<f32> = dx
            .iter()
            .chain(dg.iter())
            .chain(dbb.iter())
            .copied()
            .collect();
        results.push(("batchnorm".to_string(), rel_err(&analytic, &fd)));
    }

    // relu (inputs kept away from the kink)
    {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut x = randn4((2, 2, 3, 4), &mut rng);
        x.mapv_inplace(|v| if v.abs() < 0.2 { v.signum() * 0.2 } else { v });
        let dout = randn4((2, 2, 3, 4), &mut rng);
        let a = relu(&x);
        let dx = relu_backward(&a, &dout);
        let r64 = to_f64_4(&dout);
        let f = move |t: &[f64]| -> f64 {
            let x = Array4::from_shape_vec((2, 2, 3, 4), t.to_vec()).unwrap();
            (relu_ref(&x) * r64.view()).sum()
        };
        let fd = fd_grad(&f, to_f64_4(&x).as_slice().unwrap(), 1e-3);
        results.push(("relu".to_string(), rel_err(dx.as_slice().unwrap(), &fd)));
    }

    // nearest-neighbor x2 upsampling
    {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn4((2, 2, 3, 4), &mut rng);
        let dout = randn4((2, 2, 6, 8), &mut rng);
        let dx = upsample2_backward(&dout);
        let r64 = to_f64_4(&dout);
        let f = move |t: &[f64]| -> f64 {
            let x = Array4::from_shape_vec((2, 2, 3, 4), t.to_vec()).unwrap();
            (upsample2_ref(&x) * r64.view()).sum()
        };
        let fd = fd_grad(&f, to_f64_4(&x).as_slice().unwrap(), 1e-3);
        results.push(("upsample2".to_string(), rel_err(dx.as_slice().unwrap(), &fd)));
    }

    // sigmoid + mse heatmap loss
    {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pred = randn4((2, 3, 4, 5), &mut rng);
        let target = Array4::from_shape_simple_fn((2, 3, 4, 5), || rng.random_range(0.0f32..1.0));
        let (_, grad) = heatmap_loss(&pred, &target).unwrap();
        let t64 = to_f64_4(&target);
        let f = move |t: &[f64]| -> f64 {
            let n = t.len() as f64;
            t.iter()
                .zip(t64.iter())
                .map(|(&p, &tv)| {
                    let y = 1.0 / (1.0 + (-p).exp());
                    (y - tv) * (y - tv)
                })
                .sum::<f64>()
                / n
        };
        let fd = fd_grad(&f, to_f64_4(&pred).as_slice().unwrap(), 1e-6);
        results.push(("heatmap_loss".to_string(), rel_err(grad.as_slice().unwrap(), &fd)));
    }

    // soft-argmax keypoint decoding
    {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let s = Array2::from_shape_simple_fn((5, 7), || rng.random_range(-2.0f32..2.0));
        let (_, _, du, dv) = soft_argmax_grad(&s.view());
        let s64: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        let decode = |t: &[f64]| -> (f64, f64) {
            let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let beta = super::SOFTARGMAX_BETA as f64;
            let p: Vec<f64> = t.iter().map(|&v| (beta * (v - max)).exp()).collect();
            let sum: f64 = p.iter().sum();
            let mut u = 0.0;
            let mut v = 0.0;
            for (i, pv) in p.iter().enumerate() {
                u += pv / sum * (i % 7) as f64;
                v += pv / sum * (i / 7) as f64;
            }
            (2.0 * u, 2.0 * v)
        };
        let fu = move |t: &[f64]| decode(t).0;
        let fv = move |t: &[f64]| decode(t).1;
        let fd_u = fd_grad(&fu, &s64, 1e-6);
        let fd_v = fd_grad(&fv, &s64, 1e-6);
        let eu = rel_err(du.as_slice().unwrap(), &fd_u);
        let ev = rel_err(dv.as_slice().unwrap(), &fd_v);
        results.push(("soft_argmax".to_string(), eu.max(ev)));
    }

    results
}

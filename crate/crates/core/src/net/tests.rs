use super::*;
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Provenance;
use crate::geometry::{KeypointTriple, PixelPoint};
use layers::{randn_like, Conv2d};

// ---------------------------------------------------------------------------
// f64 reference implementations, independent of the f32 layer code. Gradient
// checks run finite differences against these.

fn conv_ref(
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
fn bn_ref(x: &Array4<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array4<f64> {
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

fn relu_ref(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

fn upsample2_ref(x: &Array4<f64>) -> Array4<f64> {
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

fn to_f64_4(a: &Array4<f32>) -> Array4<f64> {
    a.mapv(|v| v as f64)
}

fn to_f64_1(a: &Array1<f32>) -> Array1<f64> {
    a.mapv(|v| v as f64)
}

/// ||a - b|| / max(||b||, tiny)
fn rel_err(analytic: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    for (&a, &r) in analytic.iter().zip(reference) {
        diff2 += (a as f64 - r) * (a as f64 - r);
        ref2 += r * r;
    }
    (diff2 / ref2.max(1e-20)).sqrt()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Per-layer gradient checks: analytic f32 gradients vs central finite
// differences on the f64 reference. Required relative error < 1e-4.

fn check_conv_gradients(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) {
    let mut r = rng(7 + k as u64 + stride as u64);
    let conv = Conv2d::new(in_ch, out_ch, k, stride, pad, &mut r);
    let x = randn_like((2, in_ch, 5, 6), 1.0, &mut r);
    let (oh, ow) = conv.out_size(5, 6);
    let dout = randn_like((2, out_ch, oh, ow), 1.0, &mut r);

    let (dx, dw, db) = conv.backward(&x.view(), &dout.view());

    let x64 = to_f64_4(&x);
    let w64 = to_f64_4(&conv.weight);
    let b64 = to_f64_1(&conv.bias);
    let r64 = to_f64_4(&dout);
    let f = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| -> f64 {
        (conv_ref(x, w, b, stride, pad) * r64.view()).sum()
    };
    let eps = 1e-5;

    let mut fd_w = Vec::new();
    for idx in 0..w64.len() {
        let mut wp = w64.clone();
        let mut wm = w64.clone();
        wp.as_slice_mut().unwrap()[idx] += eps;
        wm.as_slice_mut().unwrap()[idx] -= eps;
        fd_w.push((f(&x64, &wp, &b64) - f(&x64, &wm, &b64)) / (2.0 * eps));
    }
    let mut fd_b = Vec::new();
    for idx in 0..b64.len() {
        let mut bp = b64.clone();
        let mut bm = b64.clone();
        bp[idx] += eps;
        bm[idx] -= eps;
        fd_b.push((f(&x64, &w64, &bp) - f(&x64, &w64, &bm)) / (2.0 * eps));
    }
    let mut fd_x = Vec::new();
    for idx in 0..x64.len() {
        let mut xp = x64.clone();
        let mut xm = x64.clone();
        xp.as_slice_mut().unwrap()[idx] += eps;
        xm.as_slice_mut().unwrap()[idx] -= eps;
        fd_x.push((f(&xp, &w64, &b64) - f(&xm, &w64, &b64)) / (2.0 * eps));
    }
    assert!(rel_err(dw.as_slice().unwrap(), &fd_w) < 1e-4, "conv dw");
    assert!(rel_err(db.as_slice().unwrap(), &fd_b) < 1e-4, "conv db");
    assert!(rel_err(dx.as_slice().unwrap(), &fd_x) < 1e-4, "conv dx");
}

#[test]
fn public_gradient_check_passes_for_every_layer() {
    for (name, err) in super::gradcheck::check_all_layers() {
        assert!(err < 1e-4, "{name}: rel err {err}");
    }
}

#[test]
fn conv3x3_strided_gradients_match_finite_differences() {
    check_conv_gradients(2, 3, 3, 2, 1);
}

#[test]
fn conv3x3_unit_stride_gradients_match_finite_differences() {
    check_conv_gradients(3, 2, 3, 1, 1);
}

#[test]
fn conv1x1_gradients_match_finite_differences() {
    check_conv_gradients(4, 3, 1, 1, 0);
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut r = rng(11);
    let mut bn = BatchNorm2d::new(3);
    bn.gamma = Array1::from_vec(vec![1.3, 0.7, 1.1]);
    bn.beta = Array1::from_vec(vec![0.2, -0.4, 0.05]);
    let x = randn_like((2, 3, 4, 4), 1.0, &mut r);
    let dout = randn_like((2, 3, 4, 4), 1.0, &mut r);

    let (_, cache) = bn.clone().forward(&x.view(), Mode::Train);
    let (dx, dg, db) = bn.backward(&cache, &dout.view());

    let x64 = to_f64_4(&x);
    let g64 = to_f64_1(&bn.gamma);
    let b64 = to_f64_1(&bn.beta);
    let r64 = to_f64_4(&dout);
    let f = |x: &Array4<f64>, g: &Array1<f64>, b: &Array1<f64>| -> f64 {
        (bn_ref(x, g, b) * r64.view()).sum()
    };
    let eps = 1e-6;

    let mut fd_x = Vec::new();
    for idx in 0..x64.len() {
        let mut xp = x64.clone();
        let mut xm = x64.clone();
        xp.as_slice_mut().unwrap()[idx] += eps;
        xm.as_slice_mut().unwrap()[idx] -= eps;
        fd_x.push((f(&xp, &g64, &b64) - f(&xm, &g64, &b64)) / (2.0 * eps));
    }
    let mut fd_g = Vec::new();
    let mut fd_b = Vec::new();
    for idx in 0..3 {
        let mut gp = g64.clone();
        let mut gm = g64.clone();
        gp[idx] += eps;
        gm[idx] -= eps;
        fd_g.push((f(&x64, &gp, &b64) - f(&x64, &gm, &b64)) / (2.0 * eps));
        let mut bp = b64.clone();
        let mut bm = b64.clone();
        bp[idx] += eps;
        bm[idx] -= eps;
        fd_b.push((f(&x64, &g64, &bp) - f(&x64, &g64, &bm)) / (2.0 * eps));
    }
    assert!(rel_err(dx.as_slice().unwrap(), &fd_x) < 1e-4, "bn dx");
    assert!(rel_err(dg.as_slice().unwrap(), &fd_g) < 1e-4, "bn dgamma");
    assert!(rel_err(db.as_slice().unwrap(), &fd_b) < 1e-4, "bn dbeta");
}

#[test]
fn relu_and_upsample_gradients_match_finite_differences() {
    let mut r = rng(13);
    // keep activations away from the relu kink so central differences are exact
    let mut x = randn_like((2, 2, 3, 4), 1.0, &mut r);
    x.mapv_inplace(|v| if v.abs() < 0.2 { v.signum() * 0.2 } else { v });
    let dout = randn_like((2, 2, 3, 4), 1.0, &mut r);
    let a = layers::relu(&x);
    let dx = layers::relu_backward(&a, &dout);
    let x64 = to_f64_4(&x);
    let r64 = to_f64_4(&dout);
    let eps = 1e-3;
    let mut fd = Vec::new();
    for idx in 0..x64.len() {
        let mut xp = x64.clone();
        let mut xm = x64.clone();
        xp.as_slice_mut().unwrap()[idx] += eps;
        xm.as_slice_mut().unwrap()[idx] -= eps;
        fd.push(((relu_ref(&xp) * r64.view()).sum() - (relu_ref(&xm) * r64.view()).sum())
            / (2.0 * eps));
    }
    assert!(rel_err(dx.as_slice().unwrap(), &fd) < 1e-4, "relu dx");

    let dout2 = randn_like((2, 2, 6, 8), 1.0, &mut r);
    let dx2 = layers::upsample2_backward(&dout2);
    let r64b = to_f64_4(&dout2);
    let mut fd2 = Vec::new();
    for idx in 0..x64.len() {
        let mut xp = x64.clone();
        let mut xm = x64.clone();
        xp.as_slice_mut().unwrap()[idx] += eps;
        xm.as_slice_mut().unwrap()[idx] -= eps;
        fd2.push(
            ((upsample2_ref(&xp) * r64b.view()).sum() - (upsample2_ref(&xm) * r64b.view()).sum())
                / (2.0 * eps),
        );
    }
    assert!(rel_err(dx2.as_slice().unwrap(), &fd2) < 1e-4, "upsample dx");
}

#[test]
fn heatmap_loss_gradient_matches_finite_differences() {
    let mut r = rng(17);
    let pred = randn_like((2, 3, 4, 5), 1.0, &mut r);
    let target = layers::rand_uniform4((2, 3, 4, 5), 0.0, 1.0, &mut r);
    let (_, grad) = heatmap_loss(&pred, &target).unwrap();

    let p64 = to_f64_4(&pred);
    let t64 = to_f64_4(&target);
    let f = |p: &Array4<f64>| -> f64 {
        let n = p.len() as f64;
        let mut loss = 0.0;
        ndarray::Zip::from(p).and(&t64).for_each(|&pv, &tv| {
            let y = 1.0 / (1.0 + (-pv).exp());
            loss += (y - tv) * (y - tv);
        });
        loss / n
    };
    let eps = 1e-6;
    let mut fd = Vec::new();
    for idx in 0..p64.len() {
        let mut pp = p64.clone();
        let mut pm = p64.clone();
        pp.as_slice_mut().unwrap()[idx] += eps;
        pm.as_slice_mut().unwrap()[idx] -= eps;
        fd.push((f(&pp) - f(&pm)) / (2.0 * eps));
    }
    assert!(rel_err(grad.as_slice().unwrap(), &fd) < 1e-4);
}

#[test]
fn soft_argmax_gradient_matches_finite_differences() {
    let mut r = rng(19);
    let s = Array2::from_shape_simple_fn((5, 7), || r.random_range(-2.0f32..2.0));
    let (u, v, du, dv) = soft_argmax_grad(&s.view());
    let p = soft_argmax(&s.view());
    assert!((p.u - u).abs() < 1e-9 && (p.v - v).abs() < 1e-9);

    let s64 = s.mapv(|x| x as f64);
    let f = |s: &Array2<f64>| -> (f64, f64) {
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let beta = SOFTARGMAX_BETA as f64;
        let p = s.mapv(|x| (beta * (x - max)).exp());
        let sum = p.sum();
        let mut u = 0.0;
        let mut v = 0.0;
        for y in 0..s.shape()[0] {
            for x in 0..s.shape()[1] {
                u += p[[y, x]] / sum * x as f64;
                v += p[[y, x]] / sum * y as f64;
            }
        }
        (2.0 * u, 2.0 * v)
    };
    let eps = 1e-6;
    let mut fd_u = Vec::new();
    let mut fd_v = Vec::new();
    for idx in 0..s64.len() {
        let mut sp = s64.clone();
        let mut sm = s64.clone();
        sp.as_slice_mut().unwrap()[idx] += eps;
        sm.as_slice_mut().unwrap()[idx] -= eps;
        let (up, vp) = f(&sp);
        let (um, vm) = f(&sm);
        fd_u.push((up - um) / (2.0 * eps));
        fd_v.push((vp - vm) / (2.0 * eps));
    }
    assert!(rel_err(du.as_slice().unwrap(), &fd_u) < 1e-4, "du/ds");
    assert!(rel_err(dv.as_slice().unwrap(), &fd_v) < 1e-4, "dv/ds");
}

/// Whole-network wiring check: the analytic directional derivative of the
/// heatmap loss matches a central finite difference on an f64 reference
/// forward of the entire architecture.
#[test]
fn full_network_directional_derivative_matches_reference() {
    let mut net = KeypointNet::new(24, 16, 3);
    let mut r = rng(23);
    let x = layers::rand_uniform4((2, 3, 16, 24), 0.0, 1.0, &mut r);
    let (oh, ow) = net.output_size();
    let target = layers::rand_uniform4((2, 3, oh, ow), 0.0, 1.0, &mut r);

    let (out, cache) = net.forward(&x, Mode::Train).unwrap();
    let (_, dout) = heatmap_loss(&out, &target).unwrap();
    let grads = net.backward(&cache, &dout);

    // random unit direction over all trainable parameters
    let dir4 = |shape: &[usize], r: &mut ChaCha8Rng| {
        Array4::from_shape_simple_fn(
            (shape[0], shape[1], shape[2], shape[3]),
            || r.random_range(-1.0f64..1.0),
        )
    };
    let dir1 = |n: usize, r: &mut ChaCha8Rng| {
        Array1::from_shape_simple_fn(n, || r.random_range(-1.0f64..1.0))
    };
    struct P64 {
        w: Vec<Array4<f64>>,
        b: Vec<Array1<f64>>,
        g: Vec<Array1<f64>>,
        bt: Vec<Array1<f64>>,
    }
    let params = P64 {
        w: vec![
            to_f64_4(&net.enc1.weight),
            to_f64_4(&net.enc2.weight),
            to_f64_4(&net.enc3.weight),
            to_f64_4(&net.dec1.weight),
            to_f64_4(&net.dec2.weight),
            to_f64_4(&net.head.weight),
        ],
        b: vec![
            to_f64_1(&net.enc1.bias),
            to_f64_1(&net.enc2.bias),
            to_f64_1(&net.enc3.bias),
            to_f64_1(&net.dec1.bias),
            to_f64_1(&net.dec2.bias),
            to_f64_1(&net.head.bias),
        ],
        g: vec![to_f64_1(&net.bn1.gamma), to_f64_1(&net.bn2.gamma)],
        bt: vec![to_f64_1(&net.bn1.beta), to_f64_1(&net.bn2.beta)],
    };
    let dw: Vec<Array4<f64>> = params.w.iter().map(|a| dir4(a.shape(), &mut r)).collect();
    let db: Vec<Array1<f64>> = params.b.iter().map(|a| dir1(a.len(), &mut r)).collect();
    let dg: Vec<Array1<f64>> = params.g.iter().map(|a| dir1(a.len(), &mut r)).collect();
    let dbt: Vec<Array1<f64>> = params.bt.iter().map(|a| dir1(a.len(), &mut r)).collect();

    let x64 = to_f64_4(&x);
    let t64 = to_f64_4(&target);
    let eval = |p: &P64| -> f64 {
        let a1 = relu_ref(&conv_ref(&x64, &p.w[0], &p.b[0], 2, 1));
        let a2 = relu_ref(&conv_ref(&a1, &p.w[1], &p.b[1], 2, 1));
        let a3 = relu_ref(&conv_ref(&a2, &p.w[2], &p.b[2], 2, 1));
        let z4 = conv_ref(&upsample2_ref(&a3), &p.w[3], &p.b[3], 1, 1);
        let a4 = relu_ref(&bn_ref(&z4, &p.g[0], &p.bt[0]));
        let z5 = conv_ref(&upsample2_ref(&a4), &p.w[4], &p.b[4], 1, 1);
        let a5 = relu_ref(&bn_ref(&z5, &p.g[1], &p.bt[1]));
        let out = conv_ref(&a5, &p.w[5], &p.b[5], 1, 0);
        let n = out.len() as f64;
        let mut loss = 0.0;
        ndarray::Zip::from(&out).and(&t64).for_each(|&pv, &tv| {
            let y = 1.0 / (1.0 + (-pv).exp());
            loss += (y - tv) * (y - tv);
        });
        loss / n
    };
    let shifted = |sign: f64, eps: f64| -> P64 {
        P64 {
            w: params
                .w
                .iter()
                .zip(&dw)
                .map(|(a, d)| a + &(d * (sign * eps)))
                .collect(),
            b: params
                .b
                .iter()
                .zip(&db)
                .map(|(a, d)| a + &(d * (sign * eps)))
                .collect(),
            g: params
                .g
                .iter()
                .zip(&dg)
                .map(|(a, d)| a + &(d * (sign * eps)))
                .collect(),
            bt: params
                .bt
                .iter()
                .zip(&dbt)
                .map(|(a, d)| a + &(d * (sign * eps)))
                .collect(),
        }
    };
    let eps = 1e-5;
    let fd = (eval(&shifted(1.0, eps)) - eval(&shifted(-1.0, eps))) / (2.0 * eps);

    let dot4 = |g: &Array4<f32>, d: &Array4<f64>| -> f64 {
        g.iter().zip(d.iter()).map(|(&a, &b)| a as f64 * b).sum()
    };
    let dot1 = |g: &Array1<f32>, d: &Array1<f64>| -> f64 {
        g.iter().zip(d.iter()).map(|(&a, &b)| a as f64 * b).sum()
    };
    let analytic = dot4(&grads.enc1_w, &dw[0])
        + dot4(&grads.enc2_w, &dw[1])
        + dot4(&grads.enc3_w, &dw[2])
        + dot4(&grads.dec1_w, &dw[3])
        + dot4(&grads.dec2_w, &dw[4])
        + dot4(&grads.head_w, &dw[5])
        + dot1(&grads.enc1_b, &db[0])
        + dot1(&grads.enc2_b, &db[1])
        + dot1(&grads.enc3_b, &db[2])
        + dot1(&grads.dec1_b, &db[3])
        + dot1(&grads.dec2_b, &db[4])
        + dot1(&grads.head_b, &db[5])
        + dot1(&grads.bn1_g, &dg[0])
        + dot1(&grads.bn2_g, &dg[1])
        + dot1(&grads.bn1_b, &dbt[0])
        + dot1(&grads.bn2_b, &dbt[1]);
    let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
    assert!(rel < 1e-3, "directional derivative rel err {rel}");
}

// ---------------------------------------------------------------------------
// Behavioral tests.

#[test]
fn forward_output_shape_is_half_input_resolution() {
    let mut net = KeypointNet::new(160, 120, 0);
    let x = Array4::<f32>::zeros((2, 3, 120, 160));
    let (out, _) = net.forward(&x, Mode::Infer).unwrap();
    assert_eq!(out.shape(), &[2, 3, 60, 80]);
    assert_eq!(net.output_size(), (60, 80));
}

#[test]
fn infer_is_deterministic_and_matches_infer_mode_forward() {
    let mut net = KeypointNet::new(24, 16, 5);
    let mut r = rng(29);
    let x = layers::rand_uniform4((1, 3, 16, 24), 0.0, 1.0, &mut r);
    let a = net.infer(&x).unwrap();
    let b = net.infer(&x).unwrap();
    assert_eq!(a, b);
    let (c, _) = net.forward(&x, Mode::Infer).unwrap();
    assert_eq!(a, c);
}

#[test]
fn soft_argmax_uniform_map_gives_center() {
    let s = Array2::<f32>::zeros((5, 9));
    let p = soft_argmax(&s.view());
    assert!((p.u - 8.0).abs() < 1e-6); // 2 * (9-1)/2
    assert!((p.v - 4.0).abs() < 1e-6);
}

#[test]
fn soft_argmax_single_strong_peak_recovers_location() {
    let mut s = Array2::<f32>::from_elem((6, 8), -30.0);
    s[[4, 2]] = 30.0;
    let p = soft_argmax(&s.view());
    assert!((p.u - 4.0).abs() < 1e-4);
    assert!((p.v - 8.0).abs() < 1e-4);
}

#[test]
fn soft_argmax_two_symmetric_peaks_give_center() {
    let mut s = Array2::<f32>::from_elem((5, 9), -30.0);
    s[[2, 1]] = 10.0;
    s[[2, 7]] = 10.0;
    let p = soft_argmax(&s.view());
    assert!((p.u - 8.0).abs() < 1e-4); // midpoint in input coords
    assert!((p.v - 4.0).abs() < 1e-4);
}

#[test]
fn target_heatmap_peaks_at_keypoint_and_flags_clamped() {
    let triple = KeypointTriple {
        vp: PixelPoint::new(40.0, 20.0),
        li: PixelPoint::new(-30.0, 58.0),
        ri: PixelPoint::new(50.0, 58.0),
    };
    let (t, clamped) = render_target_heatmaps(&triple, 2.0, 30, 40);
    assert_eq!(clamped, [false, true, false]);
    assert!((t[[CH_VP, 10, 20]] - 1.0).abs() < 1e-6);
    assert!((t[[CH_RI, 29, 25]] - 1.0).abs() < 1e-6);
    // clamped intercept pinned to the left edge
    assert!((t[[CH_LI, 29, 0]] - 1.0).abs() < 1e-6);
    // decays away from the peak
    assert!(t[[CH_VP, 10, 30]] < 1e-5);
}

#[test]
fn flip_augment_twice_is_identity() {
    let mut r = rng(31);
    let img = Array3::from_shape_simple_fn((3, 6, 8), || r.random_range(0.0f32..1.0));
    let triple = KeypointTriple {
        vp: PixelPoint::new(3.5, 1.0),
        li: PixelPoint::new(1.0, 5.0),
        ri: PixelPoint::new(6.0, 5.0),
    };
    let (f1, t1) = flip_augment(&img, &triple);
    assert!(t1.li.u < t1.ri.u);
    let (f2, t2) = flip_augment(&f1, &t1);
    assert_eq!(img, f2);
    assert!((t2.vp.u - triple.vp.u).abs() < 1e-12);
    assert!((t2.li.u - triple.li.u).abs() < 1e-12);
    assert!((t2.ri.u - triple.ri.u).abs() < 1e-12);
}

#[test]
fn artifact_round_trip_preserves_parameters_and_frozen_flags() {
    let mut net = KeypointNet::new(24, 16, 42);
    net.freeze(Group::Encoder);
    net.freeze(Group::DecBlock1);
    let artifact = net.to_artifact(Provenance {
        stage: "source".into(),
        seed: 42,
        config_hash: "deadbeef".into(),
    });
    artifact.validate_groups().unwrap();
    let restored = KeypointNet::from_artifact(&artifact).unwrap();
    assert_eq!(net, restored);
    assert!(restored.frozen.contains(&Group::Encoder));
    assert!(restored.frozen.contains(&Group::DecBlock1));
    assert!(!restored.frozen.contains(&Group::Head));
}

#[test]
fn optimizer_never_touches_frozen_groups() {
    let mut net = KeypointNet::new(24, 16, 9);
    net.freeze(Group::Encoder);
    net.freeze(Group::DecBlock1Norm);
    let before_enc = net.group_tensors(Group::Encoder);
    let before_bn1 = net.group_tensors(Group::DecBlock1Norm);

    let mut r = rng(37);
    let x = layers::rand_uniform4((2, 3, 16, 24), 0.0, 1.0, &mut r);
    let (oh, ow) = net.output_size();
    let target = layers::rand_uniform4((2, 3, oh, ow), 0.0, 1.0, &mut r);
    let mut opt = Adam::new(OptimizerKind::Adam, 1e-2, 0.01);
    for _ in 0..3 {
        let (out, cache) = net.forward(&x, Mode::Train).unwrap();
        let (_, dout) = heatmap_loss(&out, &target).unwrap();
        let grads = net.backward(&cache, &dout);
        opt.step(&mut net, &grads);
    }
    // frozen parameter groups are bit-identical (bn1 running stats are
    // touched by Train-mode forward, so compare only gamma/beta)
    assert_eq!(before_enc, net.group_tensors(Group::Encoder));
    for (name, data) in &before_bn1 {
        if name.contains("running") {
            continue;
        }
        let after = net
            .group_tensors(Group::DecBlock1Norm)
            .into_iter()
            .find(|(n, _)| n == name)
            .unwrap()
            .1;
        assert_eq!(*data, after, "{name} changed despite frozen group");
    }
    // non-frozen groups did change
    let head_after = net.group_tensors(Group::Head);
    let head_init = KeypointNet::new(24, 16, 9).group_tensors(Group::Head);
    assert_ne!(head_init, head_after);
}

fn tiny_dataset(dir: &std::path::Path, n: usize) -> crate::data::Dataset {
    let rig = crate::geometry::CameraRig {
        fx: 20.0,
        fy: 20.0,
        cx: 16.0,
        cy: 12.0,
        width: 32,
        height: 24,
        baseline: 0.10,
        cam_height: 0.30,
    };
    let rows = crate::geometry::RowGeometry {
        row_spacing: 0.76,
        robot_width: 0.50,
    };
    let domain = crate::sim::DomainAppearance::preset("early_corn").unwrap();
    crate::sim::generate_dataset(
        &rig,
        &rows,
        &domain,
        &crate::sim::PoseRanges::default(),
        n,
        0.0,
        77,
        dir,
    )
    .unwrap()
}

#[test]
fn train_source_zero_epochs_only_freezes_encoder() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(tmp.path(), 2);
    let mut net = KeypointNet::new(32, 24, 1);
    let before = net.tensor_snapshot();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let history = train_source(&mut net, &ds, &cfg).unwrap();
    assert!(history.is_empty());
    assert_eq!(before, net.tensor_snapshot());
    assert!(net.frozen.contains(&Group::Encoder));
}

#[test]
fn train_source_reduces_loss_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(tmp.path(), 12);
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut net_a = KeypointNet::new(32, 24, 1);
    let hist_a = train_source(&mut net_a, &ds, &cfg).unwrap();
    assert!(
        hist_a.last().unwrap() < hist_a.first().unwrap(),
        "loss did not decrease: {hist_a:?}"
    );
    let mut net_b = KeypointNet::new(32, 24, 1);
    let hist_b = train_source(&mut net_b, &ds, &cfg).unwrap();
    assert_eq!(hist_a, hist_b);
    assert_eq!(net_a, net_b);
}

#[test]
fn train_source_rejects_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(tmp.path(), 0);
    let mut net = KeypointNet::new(32, 24, 1);
    assert!(matches!(
        train_source(&mut net, &ds, &TrainConfig::default()),
        Err(crate::error::NetError::EmptyDataset)
    ));
}

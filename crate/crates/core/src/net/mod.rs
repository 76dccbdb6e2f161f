//! Small convolutional keypoint network: three strided encoder blocks, two
//! upsampling decoder blocks with batch norm, and a 1x1 head predicting
//! three spatial heatmaps (vp, li, ri) at half the input resolution.

pub mod gradcheck;
mod layers;
mod train;

pub use layers::{BatchNorm2d, Conv2d, Mode, BN_EPS};
pub use train::{train_source, Adam, OptimizerKind, TrainConfig};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array3, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ArchDescriptor, LayerSpec, ModelArtifact, NamedTensor, Provenance};
use crate::error::{DataError, NetError};
use crate::geometry::{KeypointTriple, PixelPoint};
use layers::{relu, relu_backward, upsample2, upsample2_backward, BnCache};

/// Named parameter groups; the adaptation stages select trainable subsets
/// by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Encoder,
    DecBlock1,
    DecBlock1Norm,
    DecBlock2,
    Head,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::DecBlock1 => "dec_block1",
            Group::DecBlock1Norm => "dec_block1_norm",
            Group::DecBlock2 => "dec_block2",
            Group::Head => "head",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Some(match s {
            "encoder" => Group::Encoder,
            "dec_block1" => Group::DecBlock1,
            "dec_block1_norm" => Group::DecBlock1Norm,
            "dec_block2" => Group::DecBlock2,
            "head" => Group::Head,
            _ => return None,
        })
    }

    pub fn all() -> [Group; 5] {
        [
            Group::Encoder,
            Group::DecBlock1,
            Group::DecBlock1Norm,
            Group::DecBlock2,
            Group::Head,
        ]
    }
}

/// Heatmap channel order.
pub const CH_VP: usize = 0;
pub const CH_LI: usize = 1;
pub const CH_RI: usize = 2;

const ENC_CH: [usize; 3] = [16, 32, 64];
const DEC1_CH: usize = 32;
const DEC2_CH: usize = 16;

/// The keypoint model: parameters plus frozen-group flags.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointNet {
    pub input_width: usize,
    pub input_height: usize,
    pub enc1: Conv2d,
    pub enc2: Conv2d,
    pub enc3: Conv2d,
    pub dec1: Conv2d,
    pub bn1: BatchNorm2d,
    pub dec2: Conv2d,
    pub bn2: BatchNorm2d,
    pub head: Conv2d,
    pub frozen: BTreeSet<Group>,
}

/// Per-parameter gradients, same shapes as the trainable tensors.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub enc1_w: Array4<f32>,
    pub enc1_b: Array1<f32>,
    pub enc2_w: Array4<f32>,
    pub enc2_b: Array1<f32>,
    pub enc3_w: Array4<f32>,
    pub enc3_b: Array1<f32>,
    pub dec1_w: Array4<f32>,
    pub dec1_b: Array1<f32>,
    pub bn1_g: Array1<f32>,
    pub bn1_b: Array1<f32>,
    pub dec2_w: Array4<f32>,
    pub dec2_b: Array1<f32>,
    pub bn2_g: Array1<f32>,
    pub bn2_b: Array1<f32>,
    pub head_w: Array4<f32>,
    pub head_b: Array1<f32>,
}

/// Intermediate activations retained for the backward pass.
pub struct ForwardCache {
    x0: Array4<f32>,
    a1: Array4<f32>,
    a2: Array4<f32>,
    a3: Array4<f32>,
    u1: Array4<f32>,
    bn1_cache: BnCache,
    a4: Array4<f32>,
    u2: Array4<f32>,
    bn2_cache: BnCache,
    a5: Array4<f32>,
}

impl KeypointNet {
    /// Deterministic He-normal initialization.
    pub fn new(input_width: usize, input_height: usize, seed: u64) -> Self {
        assert!(
            input_width % 8 == 0 && input_height % 8 == 0,
            "input dimensions must be divisible by 8"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = KeypointNet {
            input_width,
            input_height,
            enc1: Conv2d::new(3, ENC_CH[0], 3, 2, 1, &mut rng),
            enc2: Conv2d::new(ENC_CH[0], ENC_CH[1], 3, 2, 1, &mut rng),
            enc3: Conv2d::new(ENC_CH[1], ENC_CH[2], 3, 2, 1, &mut rng),
            dec1: Conv2d::new(ENC_CH[2], DEC1_CH, 3, 1, 1, &mut rng),
            bn1: BatchNorm2d::new(DEC1_CH),
            dec2: Conv2d::new(DEC1_CH, DEC2_CH, 3, 1, 1, &mut rng),
            bn2: BatchNorm2d::new(DEC2_CH),
            head: Conv2d::new(DEC2_CH, 3, 1, 1, 0, &mut rng),
            frozen: BTreeSet::new(),
        };
        // Start the logits at the background level so sigmoid+MSE training
        // begins near the all-background optimum instead of saturating its
        // way there; peaks then grow out of feature evidence.
        net.head.bias.fill(-4.0);
        net
    }

    /// Output heatmap size (h', w') = input/2.
    pub fn output_size(&self) -> (usize, usize) {
        (self.input_height / 2, self.input_width / 2)
    }

    pub fn freeze(&mut self, group: Group) {
        self.frozen.insert(group);
    }

    /// Groups currently allowed to receive updates.
    pub fn trainable_groups(&self) -> BTreeSet<Group> {
        Group::all()
            .into_iter()
            .filter(|g| !self.frozen.contains(g))
            .collect()
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<(), NetError> {
        let s = x.shape();
        if s[1] != 3 || s[2] != self.input_height || s[3] != self.input_width {
            return Err(NetError::ShapeMismatch {
                found: s.to_vec(),
                expected: vec![s[0], 3, self.input_height, self.input_width],
            });
        }
        Ok(())
    }

    /// Full forward pass with cache. Training mode uses batch statistics and
    /// updates the running statistics.
    pub fn forward(
        &mut self,
        x: &Array4<f32>,
        mode: Mode,
    ) -> Result<(Array4<f32>, ForwardCache), NetError> {
        self.check_input(x)?;
        let a1 = relu(&self.enc1.forward(&x.view()));
        let a2 = relu(&self.enc2.forward(&a1.view()));
        let a3 = relu(&self.enc3.forward(&a2.view()));
        let u1 = upsample2(&a3);
        let z4 = self.dec1.forward(&u1.view());
        let (n4, bn1_cache) = self.bn1.forward(&z4.view(), mode);
        let a4 = relu(&n4);
        let u2 = upsample2(&a4);
        let z5 = self.dec2.forward(&u2.view());
        let (n5, bn2_cache) = self.bn2.forward(&z5.view(), mode);
        let a5 = relu(&n5);
        let out = self.head.forward(&a5.view());
        Ok((
            out,
            ForwardCache {
                x0: x.clone(),
                a1,
                a2,
                a3,
                u1,
                bn1_cache,
                a4,
                u2,
                bn2_cache,
                a5,
            },
        ))
    }

    /// Inference-mode forward without cache (running statistics, immutable).
    pub fn infer(&self, x: &Array4<f32>) -> Result<Array4<f32>, NetError> {
        self.check_input(x)?;
        let a1 = relu(&self.enc1.forward(&x.view()));
        let a2 = relu(&self.enc2.forward(&a1.view()));
        let a3 = relu(&self.enc3.forward(&a2.view()));
        let u1 = upsample2(&a3);
        let mut z4 = self.dec1.forward(&u1.view());
        self.bn1.forward_infer(&mut z4);
        let a4 = relu(&z4);
        let u2 = upsample2(&a4);
        let mut z5 = self.dec2.forward(&u2.view());
        self.bn2.forward_infer(&mut z5);
        let a5 = relu(&z5);
        Ok(self.head.forward(&a5.view()))
    }

    /// Backward pass from the gradient w.r.t. the raw head output.
    pub fn backward(&self, cache: &ForwardCache, dout: &Array4<f32>) -> Gradients {
        let (da5, head_w, head_b) = self.head.backward(&cache.a5.view(), &dout.view());
        let dn5 = relu_backward(&cache.a5, &da5);
        let (dz5, bn2_g, bn2_b) = self.bn2.backward(&cache.bn2_cache, &dn5.view());
        let (du2, dec2_w, dec2_b) = self.dec2.backward(&cache.u2.view(), &dz5.view());
        let da4 = upsample2_backward(&du2);
        let dn4 = relu_backward(&cache.a4, &da4);
        let (dz4, bn1_g, bn1_b) = self.bn1.backward(&cache.bn1_cache, &dn4.view());
        let (du1, dec1_w, dec1_b) = self.dec1.backward(&cache.u1.view(), &dz4.view());
        let da3 = upsample2_backward(&du1);
        let dz3 = relu_backward(&cache.a3, &da3);
        let (da2, enc3_w, enc3_b) = self.enc3.backward(&cache.a2.view(), &dz3.view());
        let dz2 = relu_backward(&cache.a2, &da2);
        let (da1, enc2_w, enc2_b) = self.enc2.backward(&cache.a1.view(), &dz2.view());
        let dz1 = relu_backward(&cache.a1, &da1);
        let (_, enc1_w, enc1_b) = self.enc1.backward(&cache.x0.view(), &dz1.view());
        Gradients {
            enc1_w,
            enc1_b,
            enc2_w,
            enc2_b,
            enc3_w,
            enc3_b,
            dec1_w,
            dec1_b,
            bn1_g,
            bn1_b,
            dec2_w,
            dec2_b,
            bn2_g,
            bn2_b,
            head_w,
            head_b,
        }
    }

    /// Group membership of every tensor name.
    pub fn group_index() -> BTreeMap<String, Vec<String>> {
        let mut groups = BTreeMap::new();
        groups.insert(
            "encoder".to_string(),
            ["enc1.weight", "enc1.bias", "enc2.weight", "enc2.bias", "enc3.weight", "enc3.bias"]
                .map(String::from)
                .to_vec(),
        );
        groups.insert(
            "dec_block1".to_string(),
            ["dec1.weight", "dec1.bias"].map(String::from).to_vec(),
        );
        groups.insert(
            "dec_block1_norm".to_string(),
            ["bn1.gamma", "bn1.beta", "bn1.running_mean", "bn1.running_var"]
                .map(String::from)
                .to_vec(),
        );
        groups.insert(
            "dec_block2".to_string(),
            [
                "dec2.weight",
                "dec2.bias",
                "bn2.gamma",
                "bn2.beta",
                "bn2.running_mean",
                "bn2.running_var",
            ]
            .map(String::from)
            .to_vec(),
        );
        groups.insert(
            "head".to_string(),
            ["head.weight", "head.bias"].map(String::from).to_vec(),
        );
        groups
    }

    /// Flat snapshot of every tensor (parameters and running statistics).
    pub fn tensor_snapshot(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        fn t4(name: &str, a: &Array4<f32>) -> (String, Vec<usize>, Vec<f32>) {
            (name.into(), a.shape().to_vec(), a.iter().copied().collect())
        }
        fn t1(name: &str, a: &Array1<f32>) -> (String, Vec<usize>, Vec<f32>) {
            (name.into(), a.shape().to_vec(), a.to_vec())
        }
        vec![
            t4("enc1.weight", &self.enc1.weight),
            t1("enc1.bias", &self.enc1.bias),
            t4("enc2.weight", &self.enc2.weight),
            t1("enc2.bias", &self.enc2.bias),
            t4("enc3.weight", &self.enc3.weight),
            t1("enc3.bias", &self.enc3.bias),
            t4("dec1.weight", &self.dec1.weight),
            t1("dec1.bias", &self.dec1.bias),
            t1("bn1.gamma", &self.bn1.gamma),
            t1("bn1.beta", &self.bn1.beta),
            t1("bn1.running_mean", &self.bn1.running_mean),
            t1("bn1.running_var", &self.bn1.running_var),
            t4("dec2.weight", &self.dec2.weight),
            t1("dec2.bias", &self.dec2.bias),
            t1("bn2.gamma", &self.bn2.gamma),
            t1("bn2.beta", &self.bn2.beta),
            t1("bn2.running_mean", &self.bn2.running_mean),
            t1("bn2.running_var", &self.bn2.running_var),
            t4("head.weight", &self.head.weight),
            t1("head.bias", &self.head.bias),
        ]
    }

    /// Tensors belonging to one group, for frozen-group audits.
    pub fn group_tensors(&self, group: Group) -> Vec<(String, Vec<f32>)> {
        let names = Self::group_index()[group.name()].clone();
        self.tensor_snapshot()
            .into_iter()
            .filter(|(n, _, _)| names.contains(n))
            .map(|(n, _, d)| (n, d))
            .collect()
    }

    /// Export to a serializable artifact.
    pub fn to_artifact(&self, provenance: Provenance) -> ModelArtifact {
        let layer = |name: &str, kind: &str, shape: Vec<usize>| LayerSpec {
            name: name.into(),
            kind: kind.into(),
            shape,
        };
        let arch = ArchDescriptor {
            input_width: self.input_width,
            input_height: self.input_height,
            layers: vec![
                layer("enc1", "conv3x3_s2_relu", vec![ENC_CH[0], 3, 3, 3]),
                layer("enc2", "conv3x3_s2_relu", vec![ENC_CH[1], ENC_CH[0], 3, 3]),
                layer("enc3", "conv3x3_s2_relu", vec![ENC_CH[2], ENC_CH[1], 3, 3]),
                layer("dec1", "up2_conv3x3_bn_relu", vec![DEC1_CH, ENC_CH[2], 3, 3]),
                layer("dec2", "up2_conv3x3_bn_relu", vec![DEC2_CH, DEC1_CH, 3, 3]),
                layer("head", "conv1x1", vec![3, DEC2_CH, 1, 1]),
            ],
        };
        let tensors = self
            .tensor_snapshot()
            .into_iter()
            .map(|(name, shape, data)| NamedTensor { name, shape, data })
            .collect();
        // frozen flags ride along in the provenance stage string
        let frozen: Vec<&str> = self.frozen.iter().map(|g| g.name()).collect();
        let mut provenance = provenance;
        provenance.stage = format!("{}|frozen={}", provenance.stage, frozen.join(","));
        ModelArtifact {
            arch,
            tensors,
            groups: Self::group_index(),
            provenance,
        }
    }

    /// Rebuild from an artifact, validating shapes.
    pub fn from_artifact(artifact: &ModelArtifact) -> Result<Self, DataError> {
        let mut net = KeypointNet::new(artifact.arch.input_width, artifact.arch.input_height, 0);
        let assign4 = |dst: &mut Array4<f32>, name: &str| -> Result<(), DataError> {
            let t = artifact
                .tensor(name)
                .ok_or_else(|| DataError::SchemaViolation {
                    field: name.into(),
                    why: "missing tensor".into(),
                })?;
            if t.shape != dst.shape() {
                return Err(DataError::ShapeMismatch {
                    name: name.into(),
                    found: t.shape.clone(),
                    expected: dst.shape().to_vec(),
                });
            }
            *dst = Array4::from_shape_vec(
                (t.shape[0], t.shape[1], t.shape[2], t.shape[3]),
                t.data.clone(),
            )
            .expect("shape checked");
            Ok(())
        };
        let assign1 = |dst: &mut Array1<f32>, name: &str| -> Result<(), DataError> {
            let t = artifact
                .tensor(name)
                .ok_or_else(|| DataError::SchemaViolation {
                    field: name.into(),
                    why: "missing tensor".into(),
                })?;
            if t.shape != dst.shape() {
                return Err(DataError::ShapeMismatch {
                    name: name.into(),
                    found: t.shape.clone(),
                    expected: dst.shape().to_vec(),
                });
            }
            *dst = Array1::from_vec(t.data.clone());
            Ok(())
        };
        assign4(&mut net.enc1.weight, "enc1.weight")?;
        assign1(&mut net.enc1.bias, "enc1.bias")?;
        assign4(&mut net.enc2.weight, "enc2.weight")?;
        assign1(&mut net.enc2.bias, "enc2.bias")?;
        assign4(&mut net.enc3.weight, "enc3.weight")?;
        assign1(&mut net.enc3.bias, "enc3.bias")?;
        assign4(&mut net.dec1.weight, "dec1.weight")?;
        assign1(&mut net.dec1.bias, "dec1.bias")?;
        assign1(&mut net.bn1.gamma, "bn1.gamma")?;
        assign1(&mut net.bn1.beta, "bn1.beta")?;
        assign1(&mut net.bn1.running_mean, "bn1.running_mean")?;
        assign1(&mut net.bn1.running_var, "bn1.running_var")?;
        assign4(&mut net.dec2.weight, "dec2.weight")?;
        assign1(&mut net.dec2.bias, "dec2.bias")?;
        assign1(&mut net.bn2.gamma, "bn2.gamma")?;
        assign1(&mut net.bn2.beta, "bn2.beta")?;
        assign1(&mut net.bn2.running_mean, "bn2.running_mean")?;
        assign1(&mut net.bn2.running_var, "bn2.running_var")?;
        assign4(&mut net.head.weight, "head.weight")?;
        assign1(&mut net.head.bias, "head.bias")?;
        net.frozen.clear();
        if let Some(frozen) = artifact.provenance.stage.split("|frozen=").nth(1) {
            for name in frozen.split(',').filter(|s| !s.is_empty()) {
                if let Some(g) = Group::from_name(name) {
                    net.frozen.insert(g);
                }
            }
        }
        Ok(net)
    }
}

/// Softmax temperature for keypoint decoding. Raw logits span only a few
/// units around a fitted peak while the background covers thousands of
/// cells; without sharpening, the diffuse background mass drags the
/// expectation toward the map center.
pub const SOFTARGMAX_BETA: f32 = 4.0;

/// Differentiable keypoint decoding: spatial softmax expectation of grid
/// coordinates, scaled x2 to input resolution.
pub fn soft_argmax(channel: &ArrayView2<f32>) -> PixelPoint {
    let (p, u, v) = soft_argmax_probs(channel);
    let _ = p;
    PixelPoint::new(u, v)
}

/// Soft-argmax returning the probability map for gradient computation.
pub fn soft_argmax_probs(channel: &ArrayView2<f32>) -> (ndarray::Array2<f32>, f64, f64) {
    let (h, w) = (channel.shape()[0], channel.shape()[1]);
    let max = channel.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut p = channel.mapv(|s| (SOFTARGMAX_BETA * (s - max)).exp());
    let sum: f32 = p.sum();
    p.mapv_inplace(|v| v / sum);
    let mut u = 0.0f64;
    let mut v = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let pv = p[[y, x]] as f64;
            u += pv * x as f64;
            v += pv * y as f64;
        }
    }
    (p, 2.0 * u, 2.0 * v)
}

/// Soft-argmax with gradients of (u, v) w.r.t. the raw channel scores:
/// du/ds_k = beta p_k (2 x_k - u), dv/ds_k = beta p_k (2 y_k - v).
pub fn soft_argmax_grad(
    channel: &ArrayView2<f32>,
) -> (f64, f64, ndarray::Array2<f32>, ndarray::Array2<f32>) {
    let (p, u, v) = soft_argmax_probs(channel);
    let (h, w) = (p.shape()[0], p.shape()[1]);
    let mut du = ndarray::Array2::<f32>::zeros((h, w));
    let mut dv = ndarray::Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let pv = p[[y, x]] as f64 * SOFTARGMAX_BETA as f64;
            du[[y, x]] = (pv * (2.0 * x as f64 - u)) as f32;
            dv[[y, x]] = (pv * (2.0 * y as f64 - v)) as f32;
        }
    }
    (u, v, du, dv)
}

/// Inference plus soft-argmax decoding for one channel-first image.
pub fn predict_image(net: &KeypointNet, image: &Array3<f32>) -> Result<KeypointTriple, NetError> {
    let mut x = Array4::<f32>::zeros((1, 3, net.input_height, net.input_width));
    x.index_axis_mut(Axis(0), 0).assign(image);
    let maps = net.infer(&x)?;
    Ok(decode_triple(&maps.index_axis(Axis(0), 0)))
}

/// Decode all three keypoints of one sample's heatmaps (3, h', w').
pub fn decode_triple(heatmaps: &ndarray::ArrayView3<f32>) -> KeypointTriple {
    KeypointTriple {
        vp: soft_argmax(&heatmaps.index_axis(Axis(0), CH_VP)),
        li: soft_argmax(&heatmaps.index_axis(Axis(0), CH_LI)),
        ri: soft_argmax(&heatmaps.index_axis(Axis(0), CH_RI)),
    }
}

/// Gaussian target heatmaps at output resolution; off-grid keypoints are
/// clamped to the nearest edge cell and flagged.
pub fn render_target_heatmaps(
    triple: &KeypointTriple,
    sigma: f64,
    out_h: usize,
    out_w: usize,
) -> (Array3<f32>, [bool; 3]) {
    let mut target = Array3::<f32>::zeros((3, out_h, out_w));
    let mut clamped = [false; 3];
    for (ch, kp) in triple.points().iter().enumerate() {
        let mut cu = kp.u / 2.0;
        let mut cv = kp.v / 2.0;
        // Off-image keypoints get a bump at the nearest edge cell; on-image
        // ones keep their fractional center (the last image row/column maps
        // to out-of-cell-range coordinates like 59.5, which is fine for a
        // Gaussian and must not be flagged).
        let max_u = (2 * out_w - 1) as f64;
        let max_v = (2 * out_h - 1) as f64;
        if kp.u < 0.0 || kp.u > max_u || kp.v < 0.0 || kp.v > max_v {
            clamped[ch] = true;
            cu = cu.clamp(0.0, (out_w - 1) as f64);
            cv = cv.clamp(0.0, (out_h - 1) as f64);
        }
        let s2 = 2.0 * sigma * sigma;
        for y in 0..out_h {
            for x in 0..out_w {
                let d2 = (x as f64 - cu).powi(2) + (y as f64 - cv).powi(2);
                target[[ch, y, x]] = (-d2 / s2).exp() as f32;
            }
        }
    }
    (target, clamped)
}

/// Mean squared error between sigmoid(pred) and target, with the analytic
/// gradient w.r.t. the raw predictions.
pub fn heatmap_loss(
    pred: &Array4<f32>,
    target: &Array4<f32>,
) -> Result<(f32, Array4<f32>), NetError> {
    if pred.shape() != target.shape() {
        return Err(NetError::ShapeMismatch {
            found: pred.shape().to_vec(),
            expected: target.shape().to_vec(),
        });
    }
    let n = pred.len() as f32;
    let mut grad = Array4::<f32>::zeros(pred.raw_dim());
    let mut loss = 0.0f32;
    ndarray::Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .for_each(|g, &p, &t| {
            let y = 1.0 / (1.0 + (-p).exp());
            let d = y - t;
            loss += d * d;
            *g = 2.0 * d * y * (1.0 - y) / n;
        });
    Ok((loss / n, grad))
}

/// Horizontal mirror of an image (channel-first (3,H,W)) and its labels.
/// li and ri swap roles so li.u < ri.u still holds.
pub fn flip_augment(image: &Array3<f32>, triple: &KeypointTriple) -> (Array3<f32>, KeypointTriple) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = image[[ch, y, w - 1 - x]];
            }
        }
    }
    let m = (w - 1) as f64;
    let flip = |p: &PixelPoint| PixelPoint::new(m - p.u, p.v);
    (
        out,
        KeypointTriple {
            vp: flip(&triple.vp),
            li: flip(&triple.ri),
            ri: flip(&triple.li),
        },
    )
}

/// Convert an interleaved H*W*3 [0,1] image into a channel-first array.
pub fn image_to_chw(img: &[f32], width: usize, height: usize) -> Array3<f32> {
    let mut out = Array3::<f32>::zeros((3, height, width));
    for y in 0..height {
        for x in 0..width {
            let base = (y * width + x) * 3;
            for c in 0..3 {
                out[[c, y, x]] = img[base + c];
            }
        }
    }
    out
}

/// Inverse of [`image_to_chw`]: channel-first back to interleaved H*W*3.
pub fn chw_to_image(img: &Array3<f32>) -> Vec<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = img[[c, y, x]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;

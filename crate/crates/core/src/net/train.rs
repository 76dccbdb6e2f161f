use std::collections::BTreeMap;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    flip_augment, heatmap_loss, image_to_chw, render_target_heatmaps, Gradients, Group,
    KeypointNet, Mode,
};
use crate::data::Dataset;
use crate::error::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Supervised source-training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f32,
    pub seed: u64,
    pub augment: bool,
    /// Gaussian target sigma in pixels at output resolution.
    pub heatmap_sigma: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            weight_decay: 1e-4,
            seed: 0,
            augment: true,
            heatmap_sigma: 2.0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay (applied to conv
/// weights only). Frozen groups are never touched.
pub struct Adam {
    pub lr: f32,
    pub weight_decay: f32,
    kind: OptimizerKind,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    state: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(kind: OptimizerKind, lr: f32, weight_decay: f32) -> Self {
        Adam {
            lr,
            weight_decay,
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    fn update(&mut self, name: &str, decay: bool, param: &mut [f32], grad: &[f32]) {
        debug_assert_eq!(param.len(), grad.len());
        let wd = if decay { self.weight_decay } else { 0.0 };
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in param.iter_mut().zip(grad) {
                    *p -= self.lr * (g + wd * *p);
                }
            }
            OptimizerKind::Adam => {
                let (m, v) = self
                    .state
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                let bc1 = 1.0 - self.beta1.powi(self.t);
                let bc2 = 1.0 - self.beta2.powi(self.t);
                for i in 0..param.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    param[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + wd * param[i]);
                }
            }
        }
    }

    /// Apply one optimizer step to every tensor of every non-frozen group.
    pub fn step(&mut self, net: &mut KeypointNet, grads: &Gradients) {
        self.t += 1;
        let trainable = net.trainable_groups();
        macro_rules! upd {
            ($group:expr, $name:literal, $decay:expr, $p:expr, $g:expr) => {
                if trainable.contains(&$group) {
                    self.update(
                        $name,
                        $decay,
                        $p.as_slice_mut().expect("contiguous"),
                        $g.as_slice().expect("contiguous"),
                    );
                }
            };
        }
        upd!(Group::Encoder, "enc1.weight", true, net.enc1.weight, grads.enc1_w);
        upd!(Group::Encoder, "enc1.bias", false, net.enc1.bias, grads.enc1_b);
        upd!(Group::Encoder, "enc2.weight", true, net.enc2.weight, grads.enc2_w);
        upd!(Group::Encoder, "enc2.bias", false, net.enc2.bias, grads.enc2_b);
        upd!(Group::Encoder, "enc3.weight", true, net.enc3.weight, grads.enc3_w);
        upd!(Group::Encoder, "enc3.bias", false, net.enc3.bias, grads.enc3_b);
        upd!(Group::DecBlock1, "dec1.weight", true, net.dec1.weight, grads.dec1_w);
        upd!(Group::DecBlock1, "dec1.bias", false, net.dec1.bias, grads.dec1_b);
        upd!(Group::DecBlock1Norm, "bn1.gamma", false, net.bn1.gamma, grads.bn1_g);
        upd!(Group::DecBlock1Norm, "bn1.beta", false, net.bn1.beta, grads.bn1_b);
        upd!(Group::DecBlock2, "dec2.weight", true, net.dec2.weight, grads.dec2_w);
        upd!(Group::DecBlock2, "dec2.bias", false, net.dec2.bias, grads.dec2_b);
        upd!(Group::DecBlock2, "bn2.gamma", false, net.bn2.gamma, grads.bn2_g);
        upd!(Group::DecBlock2, "bn2.beta", false, net.bn2.beta, grads.bn2_b);
        upd!(Group::Head, "head.weight", true, net.head.weight, grads.head_w);
        upd!(Group::Head, "head.bias", false, net.head.bias, grads.head_b);
    }
}

/// Supervised training on left-eye images against ground-truth keypoints.
/// Returns the per-epoch mean loss. The encoder group is frozen afterward.
pub fn train_source(
    net: &mut KeypointNet,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<f32>, NetError> {
    if dataset.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let (oh, ow) = net.output_size();
    let (h, w) = (net.input_height, net.input_width);
    let mut samples = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let s = dataset.load_sample(i)?;
        if s.width != w || s.height != h {
            return Err(NetError::ShapeMismatch {
                found: vec![s.height, s.width],
                expected: vec![h, w],
            });
        }
        samples.push((image_to_chw(&s.left_image, w, h), s.gt_left));
    }
    let mut opt = Adam::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Array4::<f32>::zeros((chunk.len(), 3, h, w));
            let mut target = Array4::<f32>::zeros((chunk.len(), 3, oh, ow));
            for (b, &idx) in chunk.iter().enumerate() {
                let (ref img, ref gt) = samples[idx];
                let (img, gt) = if cfg.augment && rng.random_bool(0.5) {
                    flip_augment(img, gt)
                } else {
                    (img.clone(), *gt)
                };
                x.index_axis_mut(Axis(0), b).assign(&img);
                let (t, _) = render_target_heatmaps(&gt, cfg.heatmap_sigma, oh, ow);
                target.index_axis_mut(Axis(0), b).assign(&t);
            }
            let (out, cache) = net.forward(&x, Mode::Train)?;
            let (loss, dout) = heatmap_loss(&out, &target)?;
            let grads = net.backward(&cache, &dout);
            opt.step(net, &grads);
            total += loss as f64 * chunk.len() as f64;
        }
        history.push((total / samples.len() as f64) as f32);
    }
    net.freeze(Group::Encoder);
    Ok(history)
}

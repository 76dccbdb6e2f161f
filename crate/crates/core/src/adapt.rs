//! Two-stage self-supervised adaptation: stage 1 minimizes the stereo
//! vanishing-point disparity (gated on its initial magnitude); stage 2
//! iterates geometric-prior pseudo-labeling with subset fine-tuning of the
//! intercept keypoints.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{AdaptError, GeometryError, NetError};
use crate::geometry::{
    canonicalize_triple, check_constraints, check_single_eye_constraints, compute_prior,
    decanonicalize_triple, estimate_pitch_yaw, transfer_to_other_eye, Angles, CameraRig,
    ConstraintReport, ConstraintTolerances, Eye, KeypointTriple, RowGeometry,
};
use crate::net::{
    flip_augment, heatmap_loss, image_to_chw, render_target_heatmaps, soft_argmax_grad, Adam,
    Group, KeypointNet, Mode, OptimizerKind, CH_VP,
};

/// Gaussian target sigma for stage-2 fine-tuning, pixels at output resolution.
const STAGE2_SIGMA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Stage-1 gate: vp disparity threshold, pixels (strict >).
    pub gate_disp_threshold: f64,
    /// Stage-1 gate: required fraction of gated samples (strict >).
    pub gate_fraction: f64,
    /// Run stage 1 even if the gate says no.
    pub force_stage1: bool,
    /// Never run stage 1, regardless of the gate.
    pub skip_stage1: bool,
    pub stage1_batch_size: usize,
    pub stage1_weight_decay: f32,
    pub stage1_learning_rate: f32,
    pub stage1_max_steps: usize,
    /// Weight of the vertical vp-consistency term (rectified pair ⇒ equal v).
    pub lambda_v: f64,
    pub pseudo_iterations: usize,
    pub stage2_learning_rate: f32,
    pub stage2_epochs: usize,
    pub stage2_batch_size: usize,
    pub tolerances: ConstraintTolerances,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            gate_disp_threshold: 10.0,
            gate_fraction: 0.5,
            force_stage1: false,
            skip_stage1: false,
            stage1_batch_size: 64,
            stage1_weight_decay: 0.01,
            stage1_learning_rate: 1e-4,
            stage1_max_steps: 100,
            lambda_v: 1.0,
            pseudo_iterations: 5,
            stage2_learning_rate: 1e-4,
            stage2_epochs: 10,
            stage2_batch_size: 16,
            tolerances: ConstraintTolerances::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |what: &'static str, why: String| GeometryError::InvalidParameter { what, why };
        if self.gate_disp_threshold < 0.0 {
            return Err(bad("gate_disp_threshold", format!("{}", self.gate_disp_threshold)));
        }
        if !(0.0 < self.gate_fraction && self.gate_fraction <= 1.0) {
            return Err(bad("gate_fraction", format!("{}", self.gate_fraction)));
        }
        if self.pseudo_iterations < 1 {
            return Err(bad("pseudo_iterations", "must be >= 1".into()));
        }
        if self.stage1_batch_size == 0 || self.stage2_batch_size == 0 {
            return Err(bad("batch size", "must be >= 1".into()));
        }
        if self.lambda_v < 0.0 {
            return Err(bad("lambda_v", format!("{}", self.lambda_v)));
        }
        Ok(())
    }
}

/// A model prediction promoted to a training label because it satisfied the
/// geometric-prior constraints after canonicalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    /// Record index in the adaptation dataset.
    pub index: usize,
    /// Eye whose predictions sourced the label when only one eye passed
    /// (the other eye's label is its cross-eye transfer); `None` when both
    /// eyes passed on their own predictions.
    pub source_eye: Option<Eye>,
    pub left: KeypointTriple,
    pub right: KeypointTriple,
    pub report: ConstraintReport,
    pub angles: Angles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub stage1_ran: bool,
    pub gate_fraction: f64,
    pub stage1_loss: Vec<f64>,
    /// Pseudo-label count per iteration; length = pseudo_iterations.
    pub pseudo_counts: Vec<usize>,
    /// L2 norm of the parameter change per group over the whole pipeline.
    pub group_delta_norms: BTreeMap<String, f64>,
}

/// A dataset sample preloaded as channel-first image tensors.
pub struct LoadedSample {
    pub id: String,
    pub index: usize,
    pub left: Array3<f32>,
    pub right: Array3<f32>,
    pub imu_roll: f64,
}

/// Load every sample of a dataset into memory for repeated passes.
pub fn load_samples(dataset: &Dataset) -> Result<Vec<LoadedSample>, AdaptError> {
    if dataset.is_empty() {
        return Err(AdaptError::EmptyDataset);
    }
    let mut out = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let s = dataset.load_sample(i)?;
        out.push(LoadedSample {
            id: dataset.records[i].id.clone(),
            index: i,
            left: image_to_chw(&s.left_image, s.width, s.height),
            right: image_to_chw(&s.right_image, s.width, s.height),
            imu_roll: s.imu_roll,
        });
    }
    Ok(out)
}

/// Inference-mode keypoint predictions for a list of images, batched.
pub fn predict_triples(
    net: &KeypointNet,
    images: &[&Array3<f32>],
) -> Result<Vec<KeypointTriple>, NetError> {
    let (h, w) = (net.input_height, net.input_width);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let mut x = Array4::<f32>::zeros((chunk.len(), 3, h, w));
        for (b, img) in chunk.iter().enumerate() {
            x.index_axis_mut(Axis(0), b).assign(img);
        }
        let maps = net.infer(&x)?;
        for b in 0..chunk.len() {
            out.push(crate::net::decode_triple(&maps.index_axis(Axis(0), b)));
        }
    }
    Ok(out)
}

/// Gate decision from per-sample vp disparities: strict `> threshold` per
/// sample, strict `> fraction` overall.
pub fn gate_from_disparities(disparities: &[f64], cfg: &AdaptConfig) -> (bool, f64) {
    let n = disparities.len().max(1);
    let hits = disparities
        .iter()
        .filter(|&&d| d > cfg.gate_disp_threshold)
        .count();
    let fraction = hits as f64 / n as f64;
    (fraction > cfg.gate_fraction, fraction)
}

fn vp_disparities(
    net: &KeypointNet,
    samples: &[LoadedSample],
) -> Result<Vec<f64>, NetError> {
    let lefts: Vec<&Array3<f32>> = samples.iter().map(|s| &s.left).collect();
    let rights: Vec<&Array3<f32>> = samples.iter().map(|s| &s.right).collect();
    let pl = predict_triples(net, &lefts)?;
    let pr = predict_triples(net, &rights)?;
    Ok(pl
        .iter()
        .zip(&pr)
        .map(|(l, r)| (l.vp.u - r.vp.u).abs())
        .collect())
}

/// Decide whether stage 1 should run: vp disparity `> gate_disp_threshold`
/// for more than `gate_fraction` of the samples.
pub fn vp_disparity_gate(
    net: &KeypointNet,
    dataset: &Dataset,
    cfg: &AdaptConfig,
) -> Result<(bool, f64), AdaptError> {
    let samples = load_samples(dataset)?;
    let d = vp_disparities(net, &samples)?;
    Ok(gate_from_disparities(&d, cfg))
}

/// Stage-1 loss over a forward output holding `pairs` stereo pairs laid out
/// as [left_0..left_B, right_0..right_B]: mean |u_L-u_R| + λ_v |v_L-v_R| of
/// the vp channel, with the gradient w.r.t. the raw heatmap scores.
pub fn vp_pair_loss(
    out: &Array4<f32>,
    pairs: usize,
    lambda_v: f64,
) -> (f64, Array4<f32>) {
    assert_eq!(out.shape()[0], 2 * pairs);
    let mut dout = Array4::<f32>::zeros(out.raw_dim());
    let mut loss = 0.0;
    let scale = 1.0 / pairs as f64;
    for i in 0..pairs {
        let l_ch = out.index_axis(Axis(0), i);
        let r_ch = out.index_axis(Axis(0), pairs + i);
        let (ul, vl, dul, dvl) = soft_argmax_grad(&l_ch.index_axis(Axis(0), CH_VP));
        let (ur, vr, dur, dvr) = soft_argmax_grad(&r_ch.index_axis(Axis(0), CH_VP));
        loss += scale * ((ul - ur).abs() + lambda_v * (vl - vr).abs());
        let su = (ul - ur).signum();
        let sv = (vl - vr).signum() * lambda_v;
        {
            let mut gl = dout.index_axis_mut(Axis(0), i);
            let mut gl = gl.index_axis_mut(Axis(0), CH_VP);
            gl.scaled_add((su * scale) as f32, &dul);
            gl.scaled_add((sv * scale) as f32, &dvl);
        }
        {
            let mut gr = dout.index_axis_mut(Axis(0), pairs + i);
            let mut gr = gr.index_axis_mut(Axis(0), CH_VP);
            gr.scaled_add((-su * scale) as f32, &dur);
            gr.scaled_add((-sv * scale) as f32, &dvr);
        }
    }
    (loss, dout)
}

fn stage1_inner(
    net: &mut KeypointNet,
    samples: &[LoadedSample],
    cfg: &AdaptConfig,
) -> Result<Vec<f64>, AdaptError> {
    let (h, w) = (net.input_height, net.input_width);
    let mut opt = Adam::new(
        OptimizerKind::Adam,
        cfg.stage1_learning_rate,
        cfg.stage1_weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5147_51e1);
    let mut losses = Vec::new();
    for _step in 0..cfg.stage1_max_steps {
        let b = cfg.stage1_batch_size.min(samples.len());
        let mut x = Array4::<f32>::zeros((2 * b, 3, h, w));
        for slot in 0..b {
            let idx = rng.random_range(0..samples.len());
            x.index_axis_mut(Axis(0), slot).assign(&samples[idx].left);
            x.index_axis_mut(Axis(0), b + slot)
                .assign(&samples[idx].right);
        }
        let (out, cache) = net.forward(&x, Mode::Train)?;
        let (loss, dout) = vp_pair_loss(&out, b, cfg.lambda_v);
        losses.push(loss);
        if loss < 1.0 {
            break;
        }
        let grads = net.backward(&cache, &dout);
        opt.step(net, &grads);
    }
    Ok(losses)
}

/// Stage 1: minimize the stereo vp disparity through soft-argmax on the vp
/// channel of both eyes. Errors with GateNotPassed unless `force_stage1`.
pub fn stage1_adapt_vp(
    net: &mut KeypointNet,
    dataset: &Dataset,
    cfg: &AdaptConfig,
) -> Result<Vec<f64>, AdaptError> {
    let samples = load_samples(dataset)?;
    let (run, fraction) = gate_from_disparities(&vp_disparities(net, &samples)?, cfg);
    if !run && !cfg.force_stage1 {
        return Err(AdaptError::GateNotPassed { fraction });
    }
    stage1_inner(net, &samples, cfg)
}

/// Pose estimate for one sample: roll from the IMU, pitch and yaw recovered
/// from the predicted left-eye vanishing point.
pub fn estimate_pose_from_vp(rig: &CameraRig, vp: crate::geometry::PixelPoint, imu_roll: f64) -> Angles {
    let (pitch, yaw) = estimate_pitch_yaw(rig, vp, imu_roll);
    Angles {
        roll: imu_roll,
        pitch,
        yaw,
    }
}

pub fn estimate_pose_for_sample(
    rig: &CameraRig,
    net: &KeypointNet,
    sample: &crate::sim::StereoSample,
) -> Result<Angles, NetError> {
    let left = image_to_chw(&sample.left_image, sample.width, sample.height);
    let pred = predict_triples(net, &[&left])?;
    Ok(estimate_pose_from_vp(rig, pred[0].vp, sample.imu_roll))
}

/// One sample's predictions fed into pseudo-labeling.
pub struct PredictedPair {
    pub id: String,
    pub index: usize,
    pub left: KeypointTriple,
    pub right: KeypointTriple,
    pub imu_roll: f64,
}

/// Core pseudo-labeling rule, decoupled from the network so it can be fed
/// ground-truth predictions directly: canonicalize both eyes with the
/// estimated pose, keep a sample when both eyes pass all constraints (each
/// eye labels itself) or when exactly one eye passes bounds+width (the other
/// eye's label is its cross-eye transfer). Labels are stored in original
/// image coordinates.
pub fn pseudo_labels_from_predictions(
    rig: &CameraRig,
    rows: &RowGeometry,
    preds: &[PredictedPair],
    cfg: &AdaptConfig,
) -> Result<Vec<PseudoLabel>, AdaptError> {
    let prior = compute_prior(rig, rows)?;
    let tol = &cfg.tolerances;
    let mut labels = Vec::new();
    for p in preds {
        let angles = estimate_pose_from_vp(rig, p.left.vp, p.imu_roll);
        let (can_l, can_r) = match (
            canonicalize_triple(rig, &p.left, angles),
            canonicalize_triple(rig, &p.right, angles),
        ) {
            (Ok(l), Ok(r)) => (l, r),
            _ => continue,
        };
        let joint = check_constraints(&prior, &can_l, &can_r, tol);
        let left_pass = check_single_eye_constraints(&prior, &can_l, Eye::Left, tol);
        let right_pass = check_single_eye_constraints(&prior, &can_r, Eye::Right, tol);

        let label = if joint.passed {
            let left = decanonicalize_triple(rig, &can_l, angles);
            let right = decanonicalize_triple(rig, &can_r, angles);
            match (left, right) {
                (Ok(left), Ok(right)) => Some((None, left, right, joint)),
                _ => None,
            }
        } else if left_pass || right_pass {
            let eye = if left_pass { Eye::Left } else { Eye::Right };
            let canonical = if left_pass { &can_l } else { &can_r };
            single_eye_label(rig, canonical, angles, eye, &prior, tol)
                .map(|(left, right, report)| (Some(eye), left, right, report))
        } else {
            None
        };
        if let Some((source_eye, left, right, report)) = label {
            labels.push(PseudoLabel {
                id: p.id.clone(),
                index: p.index,
                source_eye,
                left,
                right,
                report,
                angles,
            });
        }
    }
    Ok(labels)
}

/// Build both eyes' labels from the one eye that passed; the stored report
/// is recomputed on the transferred pair so `report.passed` always holds.
fn single_eye_label(
    rig: &CameraRig,
    canonical: &KeypointTriple,
    angles: Angles,
    eye: Eye,
    prior: &crate::geometry::GeometricPrior,
    tol: &ConstraintTolerances,
) -> Option<(KeypointTriple, KeypointTriple, ConstraintReport)> {
    let own = decanonicalize_triple(rig, canonical, angles).ok()?;
    let other = transfer_to_other_eye(rig, &own, angles, eye).ok()?;
    let (left, right) = match eye {
        Eye::Left => (own, other),
        Eye::Right => (other, own),
    };
    let can_l = canonicalize_triple(rig, &left, angles).ok()?;
    let can_r = canonicalize_triple(rig, &right, angles).ok()?;
    let report = check_constraints(prior, &can_l, &can_r, tol);
    if !report.passed {
        return None;
    }
    Some((left, right, report))
}

/// Predict both eyes over the set and apply the pseudo-labeling rule.
pub fn generate_pseudo_labels(
    rig: &CameraRig,
    rows: &RowGeometry,
    net: &KeypointNet,
    samples: &[LoadedSample],
    cfg: &AdaptConfig,
) -> Result<Vec<PseudoLabel>, AdaptError> {
    let lefts: Vec<&Array3<f32>> = samples.iter().map(|s| &s.left).collect();
    let rights: Vec<&Array3<f32>> = samples.iter().map(|s| &s.right).collect();
    let pl = predict_triples(net, &lefts)?;
    let pr = predict_triples(net, &rights)?;
    let preds: Vec<PredictedPair> = samples
        .iter()
        .zip(pl.into_iter().zip(pr))
        .map(|(s, (left, right))| PredictedPair {
            id: s.id.clone(),
            index: s.index,
            left,
            right,
            imu_roll: s.imu_roll,
        })
        .collect();
    pseudo_labels_from_predictions(rig, rows, &preds, cfg)
}

/// Stage 2: supervised fine-tuning on pseudo-labels (both eyes, flip
/// augmentation), updating only {head, dec_block2, dec_block1_norm}.
pub fn stage2_finetune(
    net: &mut KeypointNet,
    samples: &[LoadedSample],
    labels: &[PseudoLabel],
    cfg: &AdaptConfig,
    iteration: usize,
) -> Result<Vec<f32>, AdaptError> {
    if labels.is_empty() {
        return Err(AdaptError::EmptyPseudoLabels);
    }
    let saved_frozen = net.frozen.clone();
    let trainable: BTreeSet<Group> =
        [Group::Head, Group::DecBlock2, Group::DecBlock1Norm].into();
    net.frozen = Group::all()
        .into_iter()
        .filter(|g| !trainable.contains(g))
        .collect();

    // one supervised example per eye per label
    let mut examples: Vec<(&Array3<f32>, KeypointTriple)> = Vec::with_capacity(2 * labels.len());
    for lb in labels {
        let s = &samples[lb.index];
        examples.push((&s.left, lb.left));
        examples.push((&s.right, lb.right));
    }
    let (h, w) = (net.input_height, net.input_width);
    let (oh, ow) = net.output_size();
    let mut opt = Adam::new(OptimizerKind::Adam, cfg.stage2_learning_rate, 0.0);
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57a6_e200u64.wrapping_add(iteration as u64));
    let mut history = Vec::with_capacity(cfg.stage2_epochs);
    let result = (|| -> Result<(), NetError> {
        for _epoch in 0..cfg.stage2_epochs {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0f64;
            for chunk in order.chunks(cfg.stage2_batch_size) {
                let mut x = Array4::<f32>::zeros((chunk.len(), 3, h, w));
                let mut target = Array4::<f32>::zeros((chunk.len(), 3, oh, ow));
                for (b, &ei) in chunk.iter().enumerate() {
                    let (img, gt) = examples[ei];
                    let (img, gt) = if rng.random_bool(0.5) {
                        flip_augment(img, &gt)
                    } else {
                        (img.clone(), gt)
                    };
                    x.index_axis_mut(Axis(0), b).assign(&img);
                    let (t, _) = render_target_heatmaps(&gt, STAGE2_SIGMA, oh, ow);
                    target.index_axis_mut(Axis(0), b).assign(&t);
                }
                let (out, cache) = net.forward(&x, Mode::Train)?;
                let (loss, dout) = heatmap_loss(&out, &target)?;
                let grads = net.backward(&cache, &dout);
                opt.step(net, &grads);
                total += loss as f64 * chunk.len() as f64;
            }
            history.push((total / examples.len() as f64) as f32);
        }
        Ok(())
    })();
    net.frozen = saved_frozen;
    result?;
    Ok(history)
}

/// Full pipeline: gate → conditional stage 1 → `pseudo_iterations` rounds of
/// pseudo-labeling + stage-2 fine-tuning. Deterministic given the seed.
pub fn adapt_pipeline(
    rig: &CameraRig,
    rows: &RowGeometry,
    net: &mut KeypointNet,
    dataset: &Dataset,
    cfg: &AdaptConfig,
) -> Result<AdaptReport, AdaptError> {
    cfg.validate()?;
    let samples = load_samples(dataset)?;
    let before = net.tensor_snapshot();

    let (run, gate_fraction) = gate_from_disparities(&vp_disparities(net, &samples)?, cfg);
    let stage1_ran = (run || cfg.force_stage1) && !cfg.skip_stage1;
    let stage1_loss = if stage1_ran {
        stage1_inner(net, &samples, cfg)?
    } else {
        Vec::new()
    };

    let mut pseudo_counts = Vec::with_capacity(cfg.pseudo_iterations);
    for iteration in 0..cfg.pseudo_iterations {
        let labels = generate_pseudo_labels(rig, rows, net, &samples, cfg)?;
        pseudo_counts.push(labels.len());
        if !labels.is_empty() {
            stage2_finetune(net, &samples, &labels, cfg, iteration)?;
        }
    }

    let after = net.tensor_snapshot();
    let mut group_delta_norms = BTreeMap::new();
    let by_name: BTreeMap<&str, (&[f32], &[f32])> = before
        .iter()
        .zip(&after)
        .map(|(b, a)| (b.0.as_str(), (b.2.as_slice(), a.2.as_slice())))
        .collect();
    for (group, names) in KeypointNet::group_index() {
        let mut acc = 0.0f64;
        for name in &names {
            let (b, a) = by_name[name.as_str()];
            for (x, y) in b.iter().zip(a) {
                acc += (*x as f64 - *y as f64).powi(2);
            }
        }
        group_delta_norms.insert(group, acc.sqrt());
    }

    Ok(AdaptReport {
        stage1_ran,
        gate_fraction,
        stage1_loss,
        pseudo_counts,
        group_delta_norms,
    })
}

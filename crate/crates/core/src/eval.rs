//! Evaluation: per-keypoint mean L1 pixel error on a labeled held-out set,
//! before/after comparison tables, and annotated overlay images.

use std::collections::BTreeSet;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::EvalError;
use crate::geometry::{Eye, KeypointTriple, PixelPoint};
use crate::net::{image_to_chw, predict_image, KeypointNet};

pub const KEYPOINT_NAMES: [&str; 3] = ["vp", "li", "ri"];

/// Per-keypoint mean L1 (|Δu| + |Δv|, pixels at input resolution) over a
/// labeled set, with enough identity to pair reports in comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: String,
    pub eye: Eye,
    pub count: usize,
    /// Mean L1 per keypoint, ordered vp, li, ri.
    pub mean_l1: [f64; 3],
    /// Hash of the evaluated model artifact (empty when unknown).
    pub model_hash: String,
    /// Hash of the labeled set's manifest, used to pair before/after reports.
    pub set_hash: String,
}

/// Per-keypoint mean of |Δu| + |Δv| between predictions and labels.
pub fn mean_l1_from_predictions(
    preds: &[KeypointTriple],
    labels: &[KeypointTriple],
) -> Result<[f64; 3], EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if preds.len() != labels.len() {
        return Err(EvalError::MismatchedSets(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut acc = [0.0f64; 3];
    for (p, g) in preds.iter().zip(labels) {
        for (k, (pp, gg)) in p.points().iter().zip(g.points().iter()).enumerate() {
            acc[k] += (pp.u - gg.u).abs() + (pp.v - gg.v).abs();
        }
    }
    let n = preds.len() as f64;
    Ok([acc[0] / n, acc[1] / n, acc[2] / n])
}

/// Evaluate a model on one eye of a labeled set. `adaptation_ids`, when
/// given, enforces disjointness with the set used for adaptation.
pub fn mean_l1(
    net: &KeypointNet,
    labeled_set: &Dataset,
    eye: Eye,
    adaptation_ids: Option<&BTreeSet<String>>,
    model_hash: &str,
) -> Result<EvalReport, EvalError> {
    if labeled_set.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if let Some(ids) = adaptation_ids {
        let overlap: Vec<String> = labeled_set
            .records
            .iter()
            .filter(|r| ids.contains(&r.id))
            .map(|r| r.id.clone())
            .collect();
        if !overlap.is_empty() {
            return Err(EvalError::OverlapWithAdaptationSet(overlap));
        }
    }
    let mut preds = Vec::with_capacity(labeled_set.len());
    let mut labels = Vec::with_capacity(labeled_set.len());
    for i in 0..labeled_set.len() {
        let s = labeled_set.load_sample(i)?;
        let (img, gt) = match eye {
            Eye::Left => (&s.left_image, s.gt_left),
            Eye::Right => (&s.right_image, s.gt_right),
        };
        preds.push(predict_image(net, &image_to_chw(img, s.width, s.height))?);
        labels.push(gt);
    }
    Ok(EvalReport {
        domain: labeled_set.header.domain.clone(),
        eye,
        count: labeled_set.len(),
        mean_l1: mean_l1_from_predictions(&preds, &labels)?,
        model_hash: model_hash.to_string(),
        set_hash: labeled_set.manifest_hash()?,
    })
}

/// Before/after comparison with per-keypoint relative reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub domain: String,
    pub count: usize,
    /// (keypoint, before, after, reduction percent) per keypoint.
    pub rows: Vec<(String, f64, f64, f64)>,
}

/// Pair two reports on the same labeled set. Errors when the sets differ.
pub fn compare_report(before: &EvalReport, after: &EvalReport) -> Result<Comparison, EvalError> {
    if before.set_hash != after.set_hash || before.count != after.count {
        return Err(EvalError::MismatchedSets(format!(
            "set hashes {}..{} vs {}..{}",
            &before.set_hash[..8.min(before.set_hash.len())],
            before.count,
            &after.set_hash[..8.min(after.set_hash.len())],
            after.count
        )));
    }
    if before.eye != after.eye {
        return Err(EvalError::MismatchedSets("different eyes".into()));
    }
    let rows = KEYPOINT_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let b = before.mean_l1[k];
            let a = after.mean_l1[k];
            let red = if b > 0.0 { 100.0 * (b - a) / b } else { 0.0 };
            (name.to_string(), b, a, red)
        })
        .collect();
    Ok(Comparison {
        domain: before.domain.clone(),
        count: before.count,
        rows,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("keypoint,before_l1_px,after_l1_px,reduction_pct\n");
        for (name, b, a, red) in &self.rows {
            out.push_str(&format!("{name},{b:.4},{a:.4},{red:.2}\n"));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "domain {}  ({} samples)\n{:<10}{:>14}{:>14}{:>12}\n",
            self.domain, self.count, "keypoint", "before L1", "after L1", "reduction"
        );
        for (name, b, a, red) in &self.rows {
            out.push_str(&format!("{name:<10}{b:>11.2} px{a:>11.2} px{red:>10.1} %\n"));
        }
        out
    }
}

fn paint(img: &mut Array3<f32>, u: i64, v: i64, color: [f32; 3]) {
    let (h, w) = (img.shape()[1] as i64, img.shape()[2] as i64);
    if u < 0 || v < 0 || u >= w || v >= h {
        return;
    }
    for (c, &val) in color.iter().enumerate() {
        img[[c, v as usize, u as usize]] = val;
    }
}

fn draw_segment(img: &mut Array3<f32>, a: PixelPoint, b: PixelPoint, color: [f32; 3]) {
    let steps = ((b.u - a.u).abs().max((b.v - a.v).abs()).ceil() as usize).max(1) * 2;
    let mut last_inside: Option<(i64, i64)> = None;
    let mut clipped = false;
    let (h, w) = (img.shape()[1] as f64, img.shape()[2] as f64);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let u = a.u + t * (b.u - a.u);
        let v = a.v + t * (b.v - a.v);
        if u >= 0.0 && v >= 0.0 && u < w && v < h {
            last_inside = Some((u.round() as i64, v.round() as i64));
            paint(img, u.round() as i64, v.round() as i64, color);
        } else {
            clipped = true;
        }
    }
    // edge marker where the segment leaves the image
    if clipped {
        if let Some((u, v)) = last_inside {
            for du in -1..=1 {
                for dv in -1..=1 {
                    paint(img, u + du, v + dv, color);
                }
            }
        }
    }
}

/// Draw the predicted and ground-truth keypoint triangles (vp–li and vp–ri
/// edges) over an image; prediction in red, ground truth in green.
pub fn render_overlay(
    image: &Array3<f32>,
    pred: &KeypointTriple,
    gt: &KeypointTriple,
) -> Array3<f32> {
    let mut out = image.clone();
    const GT: [f32; 3] = [0.0, 1.0, 0.0];
    const PRED: [f32; 3] = [1.0, 0.0, 0.0];
    draw_segment(&mut out, gt.vp, gt.li, GT);
    draw_segment(&mut out, gt.vp, gt.ri, GT);
    draw_segment(&mut out, pred.vp, pred.li, PRED);
    draw_segment(&mut out, pred.vp, pred.ri, PRED);
    out
}

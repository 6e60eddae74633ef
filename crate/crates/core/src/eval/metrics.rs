//! Average precision over rotated BEV boxes.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, Box3D, Detection};

/// Detections and ground truth of one frame, in the same coordinate frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameDetections {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Box3D>,
}

impl FrameDetections {
    pub fn new(detections: Vec<Detection>, ground_truth: Vec<Box3D>) -> Self {
        Self { detections, ground_truth }
    }
}

/// Per-detection true-positive flags from greedy score-descending matching:
/// each detection takes the unmatched ground truth of highest IoU, and is a
/// true positive when that IoU is at least `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[Box3D], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = bev_iou(&dets[i].bbox, g);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou >= iou_thr {
                taken[j] = true;
                tp[i] = true;
            }
        }
    }
    tp
}

/// Area under the all-points interpolated precision/recall curve.
pub fn average_precision(frames: &[FrameDetections], iou_thr: f64) -> Result<f64> {
    let total_gt: usize = frames.iter().map(|f| f.ground_truth.len()).sum();
    if total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut scored: Vec<(f64, usize, bool)> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        let tp = match_detections(&f.detections, &f.ground_truth, iou_thr);
        scored.extend(f.detections.iter().zip(tp).map(|(d, t)| (d.score, fi, t)));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let mut tp = 0usize;
    for (k, &(_, _, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Ok(ap)
}

/// Mean `1 − IoU` over ground truth after greedy highest-IoU one-to-one
/// matching; unmatched ground truth counts as IoU 0.
pub fn gt_loss(preds: &[Box3D], gts: &[Box3D]) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = bev_iou(p, g);
            if iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; preds.len()];
    let mut iou_of = vec![0.0; gts.len()];
    let mut used_g = vec![false; gts.len()];
    for (iou, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            iou_of[j] = iou;
        }
    }
    Ok(iou_of.iter().map(|v| 1.0 - v).sum::<f64>() / gts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> Box3D {
        Box3D::bev(x, 0.0, 2.0, 2.0, 0.0)
    }

    #[test]
    fn hand_computed_staircase() {
        let gts = vec![b(0.0), b(10.0), b(20.0)];
        let dets = vec![
            Detection::new(b(0.0), 0.9),
            Detection::new(b(40.0), 0.8),
            Detection::new(b(10.0), 0.7),
            Detection::new(b(20.0), 0.6),
        ];
        let ap = average_precision(&[FrameDetections::new(dets, gts)], 0.5).unwrap();
        assert!((ap - (1.0 + 0.75 + 0.75) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![b(0.0), b(5.0)];
        let perfect: Vec<Detection> = gts.iter().map(|g| Detection::new(*g, 0.9)).collect();
        assert_eq!(average_precision(&[FrameDetections::new(perfect, gts.clone())], 0.7).unwrap(), 1.0);
        assert_eq!(average_precision(&[FrameDetections::new(vec![], gts)], 0.5).unwrap(), 0.0);
        assert!(matches!(average_precision(&[FrameDetections::default()], 0.5), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn gt_loss_cases() {
        let gts = vec![b(0.0), b(10.0)];
        assert_eq!(gt_loss(&gts, &gts).unwrap(), 0.0);
        assert_eq!(gt_loss(&[b(50.0)], &gts).unwrap(), 1.0);
        let l = gt_loss(&[b(0.0), b(11.0)], &gts).unwrap();
        assert!((l - (0.0 + (1.0 - 1.0 / 3.0)) / 2.0).abs() < 1e-12);
        assert!(matches!(gt_loss(&[], &[]), Err(Error::NoGroundTruth)));
    }
}

//! IoU, VOC-style greedy matching, all-point AP, mAP and detection accuracy.

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::synthgen::{AnnotatedBox, BoxGeom};

pub const EVAL_IOU: f64 = 0.5;

pub fn iou_geom(a: &BoxGeom, b: &BoxGeom) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou(a: &AnnotatedBox, b: &AnnotatedBox) -> f64 {
    iou_geom(&a.geom(), &b.geom())
}

/// Greedy TP/FP flags for detections already sorted by descending score.
///
/// Each detection claims the highest-IoU unmatched ground truth of its class
/// (lowest index on ties) when that IoU reaches `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[AnnotatedBox], iou_thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.class_id != d.class_id {
                    continue;
                }
                let o = iou_geom(&d.geom, &g.geom());
                if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            match best {
                Some((gi, _)) => {
                    taken[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP. `flags`/`scores` need not be sorted; ordering
/// is by descending score with ties kept in input order. `None` when there
/// is no ground truth and no detection.
pub fn average_precision(flags: &[bool], scores: &[f64], n_gt: usize) -> Option<f64> {
    assert_eq!(flags.len(), scores.len());
    if n_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if flags[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // monotone envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Mean over defined APs; error when none is defined.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Report("no class has a defined AP".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Fraction of ground-truth boxes matched by a correct-class detection.
pub fn detection_accuracy(dets: &[Detection], gts: &[AnnotatedBox]) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let tp = match_detections(&sorted, gts, EVAL_IOU)
        .iter()
        .filter(|&&f| f)
        .count();
    tp as f64 / gts.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    /// Unmatched ground-truth boxes.
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt: usize,
}

/// Dataset-level report from per-image detections and ground truth.
pub fn evaluate(images: &[(Vec<Detection>, Vec<AnnotatedBox>)], classes: usize) -> Result<EvalReport> {
    let mut flags: Vec<Vec<bool>> = vec![Vec::new(); classes];
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); classes];
    let mut n_gt = vec![0usize; classes];
    let (mut tp, mut fp, mut gt_total) = (0, 0, 0);
    for (dets, gts) in images {
        let mut sorted = dets.clone();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        let f = match_detections(&sorted, gts, EVAL_IOU);
        for (d, hit) in sorted.iter().zip(&f) {
            if d.class_id < classes {
                flags[d.class_id].push(*hit);
                scores[d.class_id].push(d.score);
            }
            if *hit {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        for g in gts {
            if g.class_id < classes {
                n_gt[g.class_id] += 1;
            }
        }
        gt_total += gts.len();
    }
    let per_class_ap: Vec<Option<f64>> = (0..classes)
        .map(|c| average_precision(&flags[c], &scores[c], n_gt[c]))
        .collect();
    let map = mean_ap(&per_class_ap)?;
    Ok(EvalReport {
        per_class_ap,
        map,
        accuracy: if gt_total == 0 {
            1.0
        } else {
            tp as f64 / gt_total as f64
        },
        tp,
        fp,
        fn_: gt_total - tp,
        gt: gt_total,
    })
}

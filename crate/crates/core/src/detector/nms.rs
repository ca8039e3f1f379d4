use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::eval::iou_geom;
use crate::synthgen::BoxGeom;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub geom: BoxGeom,
    pub class_id: usize,
    pub score: f64,
}

/// Descending score, then lower box coordinates.
pub(crate) fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.geom.x0.total_cmp(&b.geom.x0))
        .then(a.geom.y0.total_cmp(&b.geom.y0))
        .then(a.geom.x1.total_cmp(&b.geom.x1))
        .then(a.geom.y1.total_cmp(&b.geom.y1))
}

/// Greedy per-class suppression. A candidate is dropped when its IoU with an
/// already kept same-class detection reaches `iou_threshold`. The result is
/// in rank order; equal-rank inputs keep their relative order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| rank(&dets[i], &dets[j]));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou_geom(&k.geom, &d.geom) >= iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

use std::cmp::Ordering;

use super::{Detection, DetectionSet};

fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.bbox.x0.cmp(&b.bbox.x0))
        .then(a.bbox.y0.cmp(&b.bbox.y0))
}

/// Greedy class-agnostic non-maximum suppression.
///
/// Boxes are visited by (score desc, x0 asc, y0 asc); a box is dropped when
/// its IoU with an already kept box exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for cand in order {
        if kept.iter().all(|k| k.bbox.iou(&cand.bbox) <= iou_threshold) {
            kept.push(cand.clone());
        }
    }
    kept
}

pub fn nms_set(set: &DetectionSet, iou_threshold: f64) -> DetectionSet {
    DetectionSet {
        detections: nms(&set.detections, iou_threshold),
        oracle_id: set.oracle_id.clone(),
        query_index: set.query_index,
    }
}

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;

/// A detection as seen by the matcher: one image, one label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub confidence: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub det_index: usize,
    pub matched_gt_index: Option<usize>,
    /// IoU with the matched ground truth, or the best IoU seen for a false positive.
    pub iou: f64,
}

impl MatchOutcome {
    pub fn is_true_positive(&self) -> bool {
        self.matched_gt_index.is_some()
    }
}

/// Indices of `dets` in ranking order: confidence descending, input order on ties.
pub fn ranking_order(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy confidence-ranked matching for one (image, label) pair.
///
/// Each detection, highest confidence first, takes the still-unmatched ground
/// truth with the highest IoU, provided that IoU is at least `iou_threshold`.
/// Outcomes are returned in processing order.
pub fn match_detections(
    dets: &[ScoredBox],
    gts: &[BoundingBox],
    iou_threshold: f64,
) -> Vec<MatchOutcome> {
    let mut taken = vec![false; gts.len()];
    ranking_order(dets)
        .into_iter()
        .map(|di| {
            let det = &dets[di].bbox;
            let mut best: Option<(usize, f64)> = None;
            let mut best_any = 0.0f64;
            for (gi, gt) in gts.iter().enumerate() {
                let iou = det.iou(gt);
                best_any = best_any.max(iou);
                if taken[gi] || iou < iou_threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, iou)) => {
                    taken[gi] = true;
                    MatchOutcome {
                        det_index: di,
                        matched_gt_index: Some(gi),
                        iou,
                    }
                }
                None => MatchOutcome {
                    det_index: di,
                    matched_gt_index: None,
                    iou: best_any,
                },
            }
        })
        .collect()
}

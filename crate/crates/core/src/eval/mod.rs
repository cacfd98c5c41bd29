//! Detector evaluation: IoU matching, precision-recall curves, AP and mAP@0.5.
//!
//! Detections are matched per (image, label), ranked per class across all
//! images by confidence with ties broken by `(image_id, input order)`, and
//! integrated into AP. mAP is the mean AP over classes that have ground truth.

mod coco;
mod export;
mod matching;
mod pr;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BoundingBox;

pub use coco::{
    read_detections, read_detections_file, write_detections, CocoAnnotation, CocoCategory,
    CocoDataset, CocoImage, EvalDetection, GroundTruth, GroundTruthBox,
};
pub use export::{export_pr_plot_data, read_pr_csv, PlotFile, COMBINED_LABEL};
pub use matching::{match_detections, ranking_order, MatchOutcome, ScoredBox};
pub use pr::{average_precision, pr_curve, precision_envelope, Interpolation, PrPoint};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl EvalError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: Interpolation::AllPoints,
        }
    }
}

impl EvalConfig {
    pub fn new(iou_threshold: f64, interpolation: Interpolation) -> Result<Self, EvalError> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(EvalError::Invalid(format!(
                "iou threshold {iou_threshold} outside (0, 1]"
            )));
        }
        Ok(Self {
            iou_threshold,
            interpolation,
        })
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub ap: f64,
    pub n_ground_truth: usize,
    pub n_detections: usize,
    pub pr_points: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Classes with at least one ground truth box; these make up the mAP.
    pub per_class: Vec<ClassReport>,
    pub map: f64,
    pub config: EvalConfig,
    /// Classes with detections or a category entry but no ground truth.
    #[serde(default)]
    pub zero_ground_truth: Vec<ClassReport>,
    /// All classes pooled into one ranked list.
    pub combined: ClassReport,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn class(&self, label: &str) -> Option<&ClassReport> {
        self.per_class.iter().find(|c| c.label == label)
    }

    /// Fixed-width table of per-class AP followed by the mAP line.
    pub fn to_table(&self) -> String {
        let width = self
            .per_class
            .iter()
            .chain(&self.zero_ground_truth)
            .map(|c| c.label.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>6}  {:>6}\n",
            "class", "AP", "gt", "dets"
        );
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<width$}  {:>8.4}  {:>6}  {:>6}\n",
                c.label, c.ap, c.n_ground_truth, c.n_detections
            ));
        }
        for c in &self.zero_ground_truth {
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>6}  {:>6}\n",
                c.label, "n/a", 0, c.n_detections
            ));
        }
        out.push_str(&format!(
            "mAP@{}: {:.4} ({} classes)\n",
            self.config.iou_threshold,
            self.map,
            self.per_class.len()
        ));
        out
    }
}

struct Ranked {
    confidence: f64,
    image_id: u64,
    input_index: usize,
    tp: bool,
}

fn ranked_curve(mut ranked: Vec<Ranked>) -> Vec<(f64, bool)> {
    ranked.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.input_index.cmp(&b.input_index))
    });
    ranked.into_iter().map(|r| (r.confidence, r.tp)).collect()
}

fn class_report(
    label: &str,
    ranked: Vec<Ranked>,
    n_ground_truth: usize,
    interpolation: Interpolation,
) -> ClassReport {
    let n_detections = ranked.len();
    let pr_points = pr_curve(&ranked_curve(ranked), n_ground_truth);
    let ap = if n_ground_truth == 0 {
        0.0
    } else {
        average_precision(&pr_points, interpolation)
    };
    ClassReport {
        label: label.to_string(),
        ap,
        n_ground_truth,
        n_detections,
        pr_points,
    }
}

/// Evaluates detections against ground truth.
pub fn evaluate(dets: &[EvalDetection], gt: &GroundTruth, config: &EvalConfig) -> EvalReport {
    // (image, label) -> indices
    let mut gt_groups: BTreeMap<(u64, &str), Vec<usize>> = BTreeMap::new();
    for (i, g) in gt.boxes.iter().enumerate() {
        gt_groups
            .entry((g.image_id, g.label.as_str()))
            .or_default()
            .push(i);
    }
    let mut det_groups: BTreeMap<(u64, &str), Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        det_groups
            .entry((d.image_id, d.label.as_str()))
            .or_default()
            .push(i);
    }

    let mut tp_flags = vec![false; dets.len()];
    for (key, det_idx) in &det_groups {
        let gts: Vec<BoundingBox> = gt_groups
            .get(key)
            .map(|v| v.iter().map(|&i| gt.boxes[i].bbox).collect())
            .unwrap_or_default();
        let scored: Vec<ScoredBox> = det_idx
            .iter()
            .map(|&i| ScoredBox {
                confidence: dets[i].confidence,
                bbox: dets[i].bbox,
            })
            .collect();
        for m in match_detections(&scored, &gts, config.iou_threshold) {
            tp_flags[det_idx[m.det_index]] = m.is_true_positive();
        }
    }

    let mut n_gt: HashMap<&str, usize> = HashMap::new();
    for g in &gt.boxes {
        *n_gt.entry(g.label.as_str()).or_default() += 1;
    }
    let mut by_label: HashMap<&str, Vec<Ranked>> = HashMap::new();
    let mut combined = Vec::with_capacity(dets.len());
    for (i, d) in dets.iter().enumerate() {
        let r = || Ranked {
            confidence: d.confidence,
            image_id: d.image_id,
            input_index: i,
            tp: tp_flags[i],
        };
        by_label.entry(d.label.as_str()).or_default().push(r());
        combined.push(r());
    }

    // Known labels in category order, then unknown detection labels sorted.
    let mut labels: Vec<&str> = gt.labels.iter().map(String::as_str).collect();
    for g in &gt.boxes {
        if !labels.contains(&g.label.as_str()) {
            labels.push(&g.label);
        }
    }
    let mut warnings = Vec::new();
    let mut unknown: Vec<&str> = by_label
        .keys()
        .copied()
        .filter(|l| !labels.contains(l))
        .collect();
    unknown.sort_unstable();
    for l in &unknown {
        warnings.push(format!(
            "label `{l}` has {} detections but is not a ground-truth category; counted as false positives and excluded from mAP",
            by_label[l].len()
        ));
    }
    labels.extend(unknown);

    let mut per_class = Vec::new();
    let mut zero_ground_truth = Vec::new();
    for label in labels {
        let ranked = by_label.remove(label).unwrap_or_default();
        let n = n_gt.get(label).copied().unwrap_or(0);
        let report = class_report(label, ranked, n, config.interpolation);
        if n > 0 {
            per_class.push(report);
        } else {
            zero_ground_truth.push(report);
        }
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    let combined = class_report(
        COMBINED_LABEL,
        combined,
        gt.boxes.len(),
        config.interpolation,
    );
    EvalReport {
        per_class,
        map,
        config: *config,
        zero_ground_truth,
        combined,
        warnings,
    }
}

/// Reads both inputs and evaluates.
pub fn evaluate_files(
    detections: &Path,
    ground_truth: &Path,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let gt = GroundTruth::read(ground_truth)?;
    let dets = read_detections_file(detections)?;
    Ok(evaluate(&dets, &gt, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn gtb(image_id: u64, label: &str, b: BoundingBox) -> GroundTruthBox {
        GroundTruthBox {
            image_id,
            label: label.into(),
            bbox: b,
        }
    }

    fn det(image_id: u64, label: &str, confidence: f64, b: BoundingBox) -> EvalDetection {
        EvalDetection {
            image_id,
            label: label.into(),
            confidence,
            bbox: b,
        }
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gt = GroundTruth::from_boxes(vec![
            gtb(1, "elephant", bx(0.0, 0.0, 10.0, 10.0)),
            gtb(1, "zebra", bx(20.0, 20.0, 40.0, 30.0)),
            gtb(2, "elephant", bx(5.0, 5.0, 15.0, 25.0)),
        ]);
        let dets: Vec<_> = gt
            .boxes
            .iter()
            .map(|g| det(g.image_id, &g.label, 1.0, g.bbox))
            .collect();
        let r = evaluate(&dets, &gt, &EvalConfig::default());
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class.len(), 2);
    }

    #[test]
    fn empty_detector_scores_zero() {
        let gt = GroundTruth::from_boxes(vec![gtb(1, "elephant", bx(0.0, 0.0, 10.0, 10.0))]);
        let r = evaluate(&[], &gt, &EvalConfig::default());
        assert_eq!(r.map, 0.0);
        assert_eq!(r.class("elephant").unwrap().ap, 0.0);
    }

    #[test]
    fn map_is_mean_of_class_ap() {
        // elephant: 1 GT, 1 TP -> AP 1. zebra: 2 GT, 1 TP -> AP 0.5.
        let gt = GroundTruth::from_boxes(vec![
            gtb(1, "elephant", bx(0.0, 0.0, 10.0, 10.0)),
            gtb(1, "zebra", bx(20.0, 20.0, 30.0, 30.0)),
            gtb(2, "zebra", bx(20.0, 20.0, 30.0, 30.0)),
        ]);
        let dets = vec![
            det(1, "elephant", 0.9, bx(0.0, 0.0, 10.0, 10.0)),
            det(1, "zebra", 0.8, bx(20.0, 20.0, 30.0, 30.0)),
        ];
        let r = evaluate(&dets, &gt, &EvalConfig::default());
        assert_eq!(r.class("elephant").unwrap().ap, 1.0);
        assert_eq!(r.class("zebra").unwrap().ap, 0.5);
        assert_eq!(r.map, 0.75);
    }

    #[test]
    fn unknown_label_is_warned_and_excluded() {
        let gt = GroundTruth::from_boxes(vec![gtb(1, "elephant", bx(0.0, 0.0, 10.0, 10.0))]);
        let dets = vec![
            det(1, "elephant", 0.9, bx(0.0, 0.0, 10.0, 10.0)),
            det(1, "unicorn", 0.95, bx(0.0, 0.0, 10.0, 10.0)),
        ];
        let r = evaluate(&dets, &gt, &EvalConfig::default());
        assert_eq!(r.map, 1.0);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.zero_ground_truth[0].label, "unicorn");
        assert_eq!(r.zero_ground_truth[0].n_detections, 1);
        assert_eq!(r.combined.n_detections, 2);
    }

    #[test]
    fn rejects_bad_threshold() {
        assert!(EvalConfig::new(0.0, Interpolation::AllPoints).is_err());
        assert!(EvalConfig::new(1.0, Interpolation::AllPoints).is_ok());
        assert!(EvalConfig::new(1.5, Interpolation::AllPoints).is_err());
    }

    #[test]
    fn report_json_round_trips() {
        let gt = GroundTruth::from_boxes(vec![gtb(1, "elephant", bx(0.0, 0.0, 10.0, 10.0))]);
        let dets = vec![det(1, "elephant", 0.9, bx(0.0, 0.0, 10.0, 10.0))];
        let r = evaluate(&dets, &gt, &EvalConfig::default());
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("mAP@0.5: 1.0000"));
    }
}

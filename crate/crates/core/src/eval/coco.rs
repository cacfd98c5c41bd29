//! COCO-style ground truth and JSON Lines detections.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::bbox::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iscrowd: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Canonical serialization: pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("dataset serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json()).map_err(|e| EvalError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: u64,
    pub label: String,
    pub bbox: BoundingBox,
}

/// Ground truth resolved to labels and corner-form boxes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    /// Category names in category-id order.
    pub labels: Vec<String>,
    pub boxes: Vec<GroundTruthBox>,
    pub images: Vec<CocoImage>,
}

impl GroundTruth {
    pub fn from_dataset(ds: &CocoDataset) -> Result<Self, EvalError> {
        let mut cats: Vec<&CocoCategory> = ds.categories.iter().collect();
        cats.sort_by_key(|c| c.id);
        let mut names: HashMap<u64, &str> = HashMap::new();
        for c in &cats {
            if names.insert(c.id, &c.name).is_some() {
                return Err(EvalError::Invalid(format!("duplicate category id {}", c.id)));
            }
        }
        let image_ids: HashMap<u64, ()> = ds.images.iter().map(|i| (i.id, ())).collect();
        let mut boxes = Vec::with_capacity(ds.annotations.len());
        for a in &ds.annotations {
            let label = names.get(&a.category_id).ok_or_else(|| {
                EvalError::Invalid(format!(
                    "annotation {} references unknown category {}",
                    a.id, a.category_id
                ))
            })?;
            if !image_ids.is_empty() && !image_ids.contains_key(&a.image_id) {
                return Err(EvalError::Invalid(format!(
                    "annotation {} references unknown image {}",
                    a.id, a.image_id
                )));
            }
            let [x, y, w, h] = a.bbox;
            let bbox = BoundingBox::from_xywh(x, y, w, h)
                .map_err(|e| EvalError::Invalid(format!("annotation {}: {e}", a.id)))?;
            boxes.push(GroundTruthBox {
                image_id: a.image_id,
                label: label.to_string(),
                bbox,
            });
        }
        Ok(Self {
            labels: cats.iter().map(|c| c.name.clone()).collect(),
            boxes,
            images: ds.images.clone(),
        })
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        Self::from_dataset(&CocoDataset::read(path)?)
    }

    /// Builds a ground truth directly from labelled boxes (labels sorted).
    pub fn from_boxes(boxes: Vec<GroundTruthBox>) -> Self {
        let mut labels: Vec<String> = boxes.iter().map(|b| b.label.clone()).collect();
        labels.sort();
        labels.dedup();
        Self {
            labels,
            boxes,
            images: Vec::new(),
        }
    }

    /// `file_name -> image_id`, used to join pipeline output by content hash.
    pub fn image_ids_by_file_name(&self) -> BTreeMap<String, u64> {
        self.images
            .iter()
            .map(|i| (i.file_name.clone(), i.id))
            .collect()
    }
}

/// One line of the detections JSON Lines input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub image_id: u64,
    pub label: String,
    pub confidence: f64,
    pub bbox: BoundingBox,
}

pub fn read_detections<R: BufRead>(reader: R) -> Result<Vec<EvalDetection>, EvalError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EvalError::Invalid(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let det: EvalDetection = serde_json::from_str(&line)
            .map_err(|e| EvalError::Invalid(format!("line {}: {e}", n + 1)))?;
        if !(0.0..=1.0).contains(&det.confidence) {
            return Err(EvalError::Invalid(format!(
                "line {}: confidence {} outside [0, 1]",
                n + 1,
                det.confidence
            )));
        }
        out.push(det);
    }
    Ok(out)
}

pub fn read_detections_file(path: &Path) -> Result<Vec<EvalDetection>, EvalError> {
    let f = std::fs::File::open(path).map_err(|e| EvalError::io(path, e))?;
    read_detections(std::io::BufReader::new(f))
}

pub fn write_detections<W: std::io::Write>(
    mut w: W,
    dets: &[EvalDetection],
) -> std::io::Result<()> {
    for d in dets {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

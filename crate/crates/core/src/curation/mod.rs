//! Training-data preparation: rigid augmentation that keeps boxes exact, and
//! export of reviewed detections as a COCO-style dataset.

mod augment;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BoundingBox;
use crate::eval::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
use crate::store::DetectionEvent;

pub use augment::{augment, AugmentSpec, Transform, Variant, MIN_CLAMPED_SIDE};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("invalid: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Confirm,
    Relabel,
    Reject,
}

/// A reviewer's judgement on one detection event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub event_id: String,
    #[serde(default)]
    pub corrected_label: Option<String>,
    #[serde(default)]
    pub corrected_bbox: Option<BoundingBox>,
    pub verdict: Verdict,
    pub actor: String,
    pub ts: DateTime<Utc>,
}

impl Correction {
    pub fn validate(&self) -> Result<(), CurationError> {
        if self.event_id.is_empty() || self.actor.is_empty() {
            return Err(CurationError::Validation(
                "correction needs event_id and actor".into(),
            ));
        }
        if self.verdict == Verdict::Relabel
            && self.corrected_label.as_deref().is_none_or(str::is_empty)
        {
            return Err(CurationError::Validation(format!(
                "relabel of {} has no corrected_label",
                self.event_id
            )));
        }
        Ok(())
    }
}

/// Accepts a JSON array, a single object, or a stream of objects (JSON Lines
/// or pretty-printed).
pub fn parse_corrections(text: &str) -> Result<Vec<Correction>, CurationError> {
    let invalid = |e: serde_json::Error| CurationError::Validation(e.to_string());
    let mut parsed = Vec::new();
    for v in serde_json::Deserializer::from_str(text).into_iter::<serde_json::Value>() {
        match v.map_err(invalid)? {
            v @ serde_json::Value::Array(_) => {
                parsed.extend(serde_json::from_value::<Vec<Correction>>(v).map_err(invalid)?)
            }
            v => parsed.push(serde_json::from_value(v).map_err(invalid)?),
        }
    }
    for c in &parsed {
        c.validate()?;
    }
    Ok(parsed)
}

pub fn read_corrections<R: BufRead>(reader: R) -> Result<Vec<Correction>, CurationError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CurationError::Validation(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Correction = serde_json::from_str(&line)
            .map_err(|e| CurationError::Validation(format!("line {}: {e}", n + 1)))?;
        c.validate()?;
        out.push(c);
    }
    Ok(out)
}

pub fn read_corrections_file(path: &Path) -> Result<Vec<Correction>, CurationError> {
    let text = std::fs::read_to_string(path).map_err(|e| CurationError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_corrections(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthPolicy {
    /// Only reviewed (confirmed or relabelled) detections.
    #[default]
    ConfirmOnly,
    /// Also keep detections nobody reviewed.
    IncludeUnreviewed,
}

impl FromStr for GroundTruthPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "confirm_only" | "confirm-only" => Ok(Self::ConfirmOnly),
            "include_unreviewed" | "include-unreviewed" => Ok(Self::IncludeUnreviewed),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

/// Builds a COCO dataset from events and their reviews.
///
/// The latest correction per event (by `ts`, then input order) decides.
/// Images are listed by hash with `file_name` set to the hash; `dims` gives
/// each image's pixel size. Categories are the sorted distinct labels.
pub fn export_training_manifest(
    events: &[DetectionEvent],
    corrections: &[Correction],
    policy: GroundTruthPolicy,
    dims: &dyn Fn(&str) -> Option<(u32, u32)>,
) -> Result<CocoDataset, CurationError> {
    let by_id: HashMap<&str, &DetectionEvent> =
        events.iter().map(|e| (e.event_id.as_str(), e)).collect();
    let mut latest: HashMap<&str, &Correction> = HashMap::new();
    for c in corrections {
        c.validate()?;
        if !by_id.contains_key(c.event_id.as_str()) {
            return Err(CurationError::Validation(format!(
                "correction references unknown event {}",
                c.event_id
            )));
        }
        match latest.get(c.event_id.as_str()) {
            Some(prev) if prev.ts > c.ts => {}
            _ => {
                latest.insert(&c.event_id, c);
            }
        }
    }

    // (sha, event_id) -> (label, bbox)
    let mut kept: BTreeMap<(&str, &str), (String, BoundingBox)> = BTreeMap::new();
    for e in events {
        let entry = match latest.get(e.event_id.as_str()) {
            Some(c) => match c.verdict {
                Verdict::Reject => None,
                Verdict::Confirm => Some((
                    c.corrected_label.clone().unwrap_or_else(|| e.label.clone()),
                    c.corrected_bbox.unwrap_or(e.bbox),
                )),
                Verdict::Relabel => Some((
                    c.corrected_label.clone().expect("validated"),
                    c.corrected_bbox.unwrap_or(e.bbox),
                )),
            },
            None if policy == GroundTruthPolicy::IncludeUnreviewed => {
                Some((e.label.clone(), e.bbox))
            }
            None => None,
        };
        if let Some(v) = entry {
            kept.insert((e.image_sha256.as_str(), e.event_id.as_str()), v);
        }
    }

    let labels: BTreeSet<&str> = kept.values().map(|(l, _)| l.as_str()).collect();
    let cat_ids: HashMap<&str, u64> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (*l, i as u64 + 1))
        .collect();
    let mut ds = CocoDataset {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: labels
            .iter()
            .map(|l| CocoCategory {
                id: cat_ids[l],
                name: l.to_string(),
            })
            .collect(),
    };
    let mut image_ids: HashMap<&str, u64> = HashMap::new();
    for ((sha, _), (label, bbox)) in &kept {
        let image_id = match image_ids.get(sha) {
            Some(id) => *id,
            None => {
                let (width, height) = dims(sha).ok_or_else(|| {
                    CurationError::Validation(format!("no dimensions for image {sha}"))
                })?;
                let id = ds.images.len() as u64 + 1;
                ds.images.push(CocoImage {
                    id,
                    width,
                    height,
                    file_name: sha.to_string(),
                });
                image_ids.insert(sha, id);
                id
            }
        };
        let [x, y, w, h] = bbox.to_xywh();
        ds.annotations.push(CocoAnnotation {
            id: ds.annotations.len() as u64 + 1,
            image_id,
            category_id: cat_ids[label.as_str()],
            bbox: [x, y, w, h],
            area: Some(w * h),
            iscrowd: Some(0),
        });
    }
    Ok(ds)
}

//! Preprocessing, detector backends, realtime-first scheduling and the
//! throughput bench.

mod backend;
mod bench;
mod preprocess;
mod profile;
mod queue;
mod runner;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BoundingBox;
use crate::ingest::sha256_hex;
use crate::store::StoreError;

pub use backend::{
    BackendError, DetectInput, DetectRequest, DetectResponse, DetectorBackend, FlakyBackend,
    SyntheticBackend, SyntheticMode, TruthBox, TruthSidecar, WireDetection,
};
pub use bench::{bench_throughput, weekly_target_rate, BenchConfig, ThroughputReport};
pub use preprocess::{preprocess, resized_dims, PreprocessedImage};
pub use profile::ModelProfile;
pub use queue::{Dequeued, WorkItem, WorkQueue};
pub use runner::{
    run_pipeline, AssetSource, EventObserver, MemorySource, Pipeline, PipelineBuilder,
    PipelineConfig, PipelineReport, TraceEntry,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("decode error: {0}")]
    Decode(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("asset load failed: {0}")]
    Load(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A labelled, scored box in original-image pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: BoundingBox,
    pub model_id: String,
}

/// Content-derived event id: re-processing an image yields the same ids.
pub fn event_id(image_sha256: &str, model_id: &str, detection_index: usize) -> String {
    sha256_hex(format!("{image_sha256}\x1f{model_id}\x1f{detection_index}").as_bytes())
}

/// Confidence descending, ties by label then `x_min`.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.label.cmp(&b.label))
            .then_with(|| a.bbox.x_min.total_cmp(&b.bbox.x_min))
    });
}

/// Runs one backend call and maps its boxes back to original coordinates.
///
/// Boxes are divided by the preprocessing scale and clamped to the original
/// frame; detections under `min_confidence` are dropped.
pub fn infer(
    pre: &PreprocessedImage,
    backend: &dyn DetectorBackend,
    profile: &ModelProfile,
    min_confidence: f64,
) -> Result<Vec<Detection>, PipelineError> {
    if !(0.0..=1.0).contains(&min_confidence) {
        return Err(PipelineError::Config(format!(
            "min_confidence {min_confidence} outside [0, 1]"
        )));
    }
    let resp = backend.detect(&DetectInput {
        image: pre,
        profile,
        min_confidence,
    })?;
    let (w, h) = (pre.original_width as f64, pre.original_height as f64);
    let mut out = Vec::with_capacity(resp.detections.len());
    for d in resp.detections {
        if !profile.has_label(&d.label) {
            return Err(BackendError::Protocol(format!(
                "label `{}` is not in profile `{}`",
                d.label, profile.model_id
            ))
            .into());
        }
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(BackendError::Protocol(format!(
                "confidence {} outside [0, 1]",
                d.confidence
            ))
            .into());
        }
        if d.confidence < min_confidence {
            continue;
        }
        let Some(bbox) = d.bbox.unscaled(pre.scale).clamped(w, h) else {
            continue;
        };
        out.push(Detection {
            label: d.label,
            confidence: d.confidence,
            bbox,
            model_id: profile.model_id.clone(),
        });
    }
    sort_detections(&mut out);
    Ok(out)
}

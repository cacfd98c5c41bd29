//! Detection event persistence, queries, burst aggregation and platform stats.

mod jsonl;
mod log;
mod observe;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BoundingBox;
use crate::ingest::is_sha256_hex;

pub use self::jsonl::JsonlFile;
pub use self::log::{Appended, EventLog, DEFAULT_SEGMENT_BYTES};
pub use self::observe::{aggregate_observations, Observation, DEFAULT_INDEPENDENCE_WINDOW_MINUTES};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid: {0}")]
    Validation(String),
    #[error("corrupt log: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Realtime,
    Batch,
}

impl std::fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Realtime => "realtime",
            Self::Batch => "batch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub event_id: String,
    pub image_sha256: String,
    pub camera_id: String,
    pub model_id: String,
    pub label: String,
    pub confidence: f64,
    pub bbox: BoundingBox,
    /// Capture time from the upload manifest.
    pub detected_at: DateTime<Utc>,
    pub pipeline_mode: PipelineMode,
}

impl DetectionEvent {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.event_id.is_empty() {
            return Err(StoreError::Validation("empty event_id".into()));
        }
        if !is_sha256_hex(&self.image_sha256) {
            return Err(StoreError::Validation(format!(
                "image_sha256 `{}` is not a sha256 hex digest",
                self.image_sha256
            )));
        }
        if self.label.is_empty() || self.camera_id.is_empty() || self.model_id.is_empty() {
            return Err(StoreError::Validation(
                "label, camera_id and model_id must be non-empty".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(StoreError::Validation(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        // Re-check geometry; deserialization already enforces it.
        BoundingBox::new(
            self.bbox.x_min,
            self.bbox.y_min,
            self.bbox.x_max,
            self.bbox.y_max,
        )
        .map_err(|e| StoreError::Validation(e.to_string()))?;
        Ok(())
    }
}

/// An input that exhausted retries or failed decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub sha256: String,
    pub reason: String,
    pub attempts: u32,
    pub ts: DateTime<Utc>,
}

/// Marks an image as processed, including images with zero detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub sha256: String,
    pub model_id: String,
    pub detections: usize,
    pub pipeline_mode: PipelineMode,
    pub attempts: u32,
    pub ts: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventFilter {
    #[serde(default)]
    pub camera_id: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
    /// Inclusive lower bound on `detected_at`.
    #[serde(default)]
    pub from: Option<DateTime<Utc>>,
    /// Inclusive upper bound on `detected_at`.
    #[serde(default)]
    pub to: Option<DateTime<Utc>>,
    #[serde(default)]
    pub min_confidence: Option<f64>,
}

impl EventFilter {
    pub fn validate(&self) -> Result<(), StoreError> {
        if let (Some(from), Some(to)) = (self.from, self.to) {
            if from > to {
                return Err(StoreError::Validation(format!(
                    "inverted time range: from {from} is after to {to}"
                )));
            }
        }
        if let Some(c) = self.min_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(StoreError::Validation(format!(
                    "min_confidence {c} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn matches(&self, e: &DetectionEvent) -> bool {
        self.camera_id.as_ref().is_none_or(|c| &e.camera_id == c)
            && self.label.as_ref().is_none_or(|l| &e.label == l)
            && self.from.is_none_or(|t| e.detected_at >= t)
            && self.to.is_none_or(|t| e.detected_at <= t)
            && self.min_confidence.is_none_or(|c| e.confidence >= c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlatformStats {
    pub images_processed: usize,
    pub detection_events: usize,
    pub observations: usize,
    pub distinct_labels: usize,
    pub dead_letters: usize,
}

/// Event log plus dead-letter and image-outcome journals under one directory.
pub struct Store {
    events: EventLog,
    dead_letters: JsonlFile<DeadLetter>,
    outcomes: JsonlFile<ImageOutcome>,
    independence_window_minutes: f64,
}

impl Store {
    pub fn in_memory() -> Self {
        Self {
            events: EventLog::in_memory(),
            dead_letters: JsonlFile::in_memory(),
            outcomes: JsonlFile::in_memory(),
            independence_window_minutes: DEFAULT_INDEPENDENCE_WINDOW_MINUTES,
        }
    }

    /// Opens (or creates) a store rooted at `dir`, replaying all journals.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        Self::open_with(dir, DEFAULT_SEGMENT_BYTES)
    }

    pub fn open_with(dir: &Path, segment_bytes: u64) -> Result<Self, StoreError> {
        Ok(Self {
            events: EventLog::open_with(&dir.join("events"), segment_bytes, false)?,
            dead_letters: JsonlFile::open(&dir.join("dead_letters.jsonl"))?,
            outcomes: JsonlFile::open(&dir.join("image_outcomes.jsonl"))?,
            independence_window_minutes: DEFAULT_INDEPENDENCE_WINDOW_MINUTES,
        })
    }

    pub fn with_independence_window(mut self, minutes: f64) -> Self {
        assert!(minutes > 0.0);
        self.independence_window_minutes = minutes;
        self
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn append_event(&self, event: DetectionEvent) -> Result<Appended, StoreError> {
        self.events.append(event)
    }

    pub fn record_dead_letter(&self, rec: DeadLetter) -> Result<(), StoreError> {
        self.dead_letters.append(rec)
    }

    pub fn record_outcome(&self, rec: ImageOutcome) -> Result<(), StoreError> {
        self.outcomes.append(rec)
    }

    pub fn dead_letters(&self) -> Vec<DeadLetter> {
        self.dead_letters.snapshot()
    }

    pub fn outcomes(&self) -> Vec<ImageOutcome> {
        self.outcomes.snapshot()
    }

    /// Hashes with a terminal outcome (events, completion record or dead letter).
    pub fn processed_images(&self) -> HashSet<String> {
        let mut set: HashSet<String> =
            self.events.with_events(|evs| evs.iter().map(|e| e.image_sha256.clone()).collect());
        set.extend(self.outcomes.snapshot().into_iter().map(|o| o.sha256));
        set.extend(self.dead_letters.snapshot().into_iter().map(|d| d.sha256));
        set
    }

    /// Events matching every present filter field, ordered by capture time
    /// then event id.
    pub fn query_events(&self, filter: &EventFilter) -> Result<Vec<DetectionEvent>, StoreError> {
        filter.validate()?;
        let mut out: Vec<DetectionEvent> = self.events.with_events(|evs| {
            evs.iter().filter(|e| filter.matches(e)).cloned().collect()
        });
        out.sort_by(|a, b| {
            a.detected_at
                .cmp(&b.detected_at)
                .then_with(|| a.event_id.cmp(&b.event_id))
        });
        Ok(out)
    }

    pub fn observations(&self, window_minutes: f64) -> Vec<Observation> {
        self.events
            .with_events(|evs| aggregate_observations(evs, window_minutes))
    }

    pub fn platform_stats(&self) -> PlatformStats {
        let (detection_events, distinct_labels, observations) = self.events.with_events(|evs| {
            let labels: HashSet<&str> = evs.iter().map(|e| e.label.as_str()).collect();
            (
                evs.len(),
                labels.len(),
                aggregate_observations(evs, self.independence_window_minutes).len(),
            )
        });
        PlatformStats {
            images_processed: self.processed_images().len(),
            detection_events,
            observations,
            distinct_labels,
            dead_letters: self.dead_letters.len(),
        }
    }

    pub fn flush(&self) -> Result<(), StoreError> {
        self.events.flush()?;
        self.dead_letters.flush()?;
        self.outcomes.flush()
    }
}

#[cfg(test)]
mod tests;

//! Detector backends and the detect wire protocol.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use base64::Engine as _;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Detection, ModelProfile, PreprocessedImage};
use crate::bbox::BoundingBox;
use crate::ingest::BlobStore;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend timed out: {0}")]
    Timeout(String),
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("backend protocol violation: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Timeout(_) | Self::Unreachable(_))
    }
}

/// `POST /v1/detect` request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub model_id: String,
    pub image_b64: String,
    pub min_confidence: f64,
}

impl DetectRequest {
    pub fn new(image: &PreprocessedImage, model_id: &str, min_confidence: f64) -> Self {
        Self {
            model_id: model_id.to_string(),
            image_b64: base64::engine::general_purpose::STANDARD.encode(image.to_png()),
            min_confidence,
        }
    }

    pub fn image_bytes(&self) -> Result<Vec<u8>, BackendError> {
        base64::engine::general_purpose::STANDARD
            .decode(&self.image_b64)
            .map_err(|e| BackendError::Protocol(format!("image_b64: {e}")))
    }
}

/// One box in a detect response, in resized-image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub label: String,
    pub confidence: f64,
    pub bbox: BoundingBox,
}

/// `POST /v1/detect` response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub model_id: String,
    pub detections: Vec<WireDetection>,
    pub latency_ms: f64,
}

/// What a backend gets to look at for one image.
pub struct DetectInput<'a> {
    pub image: &'a PreprocessedImage,
    pub profile: &'a ModelProfile,
    pub min_confidence: f64,
}

/// Anything that answers the detect protocol. Implementations must be safe
/// to call from several workers at once.
pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, input: &DetectInput<'_>) -> Result<DetectResponse, BackendError>;
}

/// `{"boxes": [{"label", "bbox"}]}` in original-image coordinates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub boxes: Vec<TruthBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBox {
    pub label: String,
    pub bbox: BoundingBox,
}

impl TruthSidecar {
    pub fn read(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("truth sidecar {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("truth sidecar {}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec(self).expect("sidecar serializes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticMode {
    /// Echo `<sha256>.truth.json` with seeded uniform jitter of up to
    /// `jitter_px` on every coordinate. Confidence is 1.
    TruthSidecar { jitter_px: f64, seed: u64 },
    /// Return the same detections (original coordinates) for every image.
    Fixed(Vec<WireDetection>),
}

/// Deterministic stand-in for a trained model.
pub struct SyntheticBackend {
    name: String,
    mode: SyntheticMode,
    latency: Duration,
    blobs: Option<BlobStore>,
}

impl SyntheticBackend {
    pub fn truth(blobs: BlobStore, jitter_px: f64, seed: u64) -> Self {
        Self {
            name: "synthetic-truth".into(),
            mode: SyntheticMode::TruthSidecar { jitter_px, seed },
            latency: Duration::ZERO,
            blobs: Some(blobs),
        }
    }

    pub fn fixed(detections: Vec<WireDetection>) -> Self {
        Self {
            name: "synthetic-fixed".into(),
            mode: SyntheticMode::Fixed(detections),
            latency: Duration::ZERO,
            blobs: None,
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn mode(&self) -> &SyntheticMode {
        &self.mode
    }

    /// Detections for an asset in original-image coordinates.
    pub fn detect_original(&self, sha256: &str, model_id: &str) -> Result<Vec<Detection>, BackendError> {
        let raw = match &self.mode {
            SyntheticMode::Fixed(d) => d.clone(),
            SyntheticMode::TruthSidecar { jitter_px, seed } => {
                let blobs = self.blobs.as_ref().ok_or_else(|| {
                    BackendError::Config("truth mode needs a blob store".into())
                })?;
                let path = blobs.truth_path(sha256);
                if !path.is_file() {
                    return Err(BackendError::Config(format!(
                        "missing truth sidecar {}",
                        path.display()
                    )));
                }
                let truth = TruthSidecar::read(&path)?;
                let mut rng = jitter_rng(*seed, sha256);
                truth
                    .boxes
                    .into_iter()
                    .map(|t| WireDetection {
                        label: t.label,
                        confidence: 1.0,
                        bbox: jitter(&t.bbox, *jitter_px, &mut rng),
                    })
                    .collect()
            }
        };
        Ok(raw
            .into_iter()
            .map(|d| Detection {
                label: d.label,
                confidence: d.confidence,
                bbox: d.bbox,
                model_id: model_id.to_string(),
            })
            .collect())
    }
}

fn jitter_rng(seed: u64, sha256: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sha256.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn jitter(b: &BoundingBox, sigma: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
    if sigma <= 0.0 {
        return *b;
    }
    let mut d = || rng.gen_range(-sigma..=sigma);
    BoundingBox::new(
        b.x_min + d(),
        b.y_min + d(),
        b.x_max + d(),
        b.y_max + d(),
    )
    .unwrap_or(*b)
}

impl DetectorBackend for SyntheticBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn detect(&self, input: &DetectInput<'_>) -> Result<DetectResponse, BackendError> {
        let started = Instant::now();
        let dets = self.detect_original(&input.image.source_sha256, &input.profile.model_id)?;
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let scale = input.image.scale;
        Ok(DetectResponse {
            model_id: input.profile.model_id.clone(),
            detections: dets
                .into_iter()
                .filter(|d| d.confidence >= input.min_confidence)
                .map(|d| WireDetection {
                    label: d.label,
                    confidence: d.confidence,
                    bbox: d.bbox.scaled(scale),
                })
                .collect(),
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Wraps a backend and fails the first `failures` calls for each image with
/// a timeout. For fault-injection tests.
pub struct FlakyBackend<B> {
    inner: B,
    failures: u32,
    seen: Mutex<HashMap<String, u32>>,
}

impl<B: DetectorBackend> FlakyBackend<B> {
    pub fn new(inner: B, failures: u32) -> Self {
        Self {
            inner,
            failures,
            seen: Mutex::new(HashMap::new()),
        }
    }
}

impl<B: DetectorBackend> DetectorBackend for FlakyBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn detect(&self, input: &DetectInput<'_>) -> Result<DetectResponse, BackendError> {
        {
            let mut seen = self.seen.lock();
            let n = seen.entry(input.image.source_sha256.clone()).or_default();
            if *n < self.failures {
                *n += 1;
                return Err(BackendError::Timeout(format!("injected failure {}", *n)));
            }
        }
        self.inner.detect(input)
    }
}

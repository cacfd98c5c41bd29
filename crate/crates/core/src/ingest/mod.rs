//! Field-station ingest: content-addressed blob storage, resumable chunked
//! uploads with server-side dedupe, and a seeded fleet simulator that
//! delivers imagery over a lossy link.

mod blob;
mod fleet;
mod upload;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use blob::BlobStore;
pub use fleet::{
    simulate_fleet, DeliveryReport, FleetConfig, FleetRun, ImageDelivery, LinkModel, SimulatedImage,
};
pub use upload::{BeginOutcome, BeginResponse, ChunkResponse, UploadService, UploadSession};

pub const DEFAULT_CHUNK_SIZE: usize = 256 * 1024;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid manifest: {0}")]
    Validation(String),
    #[error("unknown upload session `{0}`")]
    UnknownSession(String),
    #[error("out-of-order chunk: session is at offset {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("chunk overflows declared length {declared} (would reach {attempted})")]
    Overflow { declared: u64, attempted: u64 },
    #[error("upload incomplete: {received} of {declared} bytes received")]
    Incomplete { received: u64, declared: u64 },
    #[error("integrity check failed: expected sha256 {expected}, got {actual}")]
    Integrity { expected: String, actual: String },
    #[error("asset {0} not found")]
    NotFound(String),
    #[error("duplicate camera id `{0}`")]
    DuplicateCamera(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Thermal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSource {
    pub camera_id: String,
    pub site_name: String,
    pub region: String,
    pub realtime: bool,
    #[serde(default)]
    pub zone_id: Option<String>,
    pub modality: Modality,
}

/// Cameras keyed by id. Serialized as a JSON array.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CameraRegistry {
    cameras: BTreeMap<String, CameraSource>,
}

impl CameraRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_cameras(cameras: impl IntoIterator<Item = CameraSource>) -> Result<Self, IngestError> {
        let mut reg = Self::new();
        for c in cameras {
            reg.insert(c)?;
        }
        Ok(reg)
    }

    pub fn insert(&mut self, camera: CameraSource) -> Result<(), IngestError> {
        if self.cameras.contains_key(&camera.camera_id) {
            return Err(IngestError::DuplicateCamera(camera.camera_id));
        }
        self.cameras.insert(camera.camera_id.clone(), camera);
        Ok(())
    }

    pub fn get(&self, camera_id: &str) -> Option<&CameraSource> {
        self.cameras.get(camera_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CameraSource> {
        self.cameras.values()
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        let cams: Vec<CameraSource> =
            serde_json::from_str(&text).map_err(|e| IngestError::json(path, e))?;
        Self::from_cameras(cams)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let cams: Vec<&CameraSource> = self.iter().collect();
        let text = serde_json::to_string_pretty(&cams).expect("cameras serialize");
        std::fs::write(path, text).map_err(|e| IngestError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadManifest {
    pub station_id: String,
    pub camera_id: String,
    pub captured_at: DateTime<Utc>,
    pub content_sha256: String,
    pub byte_length: u64,
    pub modality: Modality,
    pub sequence_no: u64,
}

impl UploadManifest {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.station_id.is_empty() {
            return Err(IngestError::Validation("empty station_id".into()));
        }
        if self.camera_id.is_empty() {
            return Err(IngestError::Validation("empty camera_id".into()));
        }
        if self.byte_length == 0 {
            return Err(IngestError::Validation("byte_length must be positive".into()));
        }
        if !is_sha256_hex(&self.content_sha256) {
            return Err(IngestError::Validation(format!(
                "content_sha256 `{}` is not 64 lowercase hex characters",
                self.content_sha256
            )));
        }
        Ok(())
    }

    /// Parses and validates a manifest JSON body.
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let m: Self = serde_json::from_str(text)
            .map_err(|e| IngestError::Validation(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAsset {
    pub sha256: String,
    pub byte_length: u64,
    pub stored_at: DateTime<Utc>,
    pub manifest: UploadManifest,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn manifest(sha: &str, len: u64) -> UploadManifest {
        UploadManifest {
            station_id: "st-1".into(),
            camera_id: "cam-1".into(),
            captured_at: "2024-03-01T02:00:00Z".parse().unwrap(),
            content_sha256: sha.into(),
            byte_length: len,
            modality: Modality::Visual,
            sequence_no: 0,
        }
    }

    #[test]
    fn manifest_validation() {
        let sha = sha256_hex(b"x");
        assert!(manifest(&sha, 1).validate().is_ok());
        assert!(manifest(&sha, 0).validate().is_err());
        assert!(manifest("abc", 1).validate().is_err());
        assert!(manifest(&sha.to_uppercase(), 1).validate().is_err());
    }

    #[test]
    fn manifest_json_field_names() {
        let sha = sha256_hex(b"x");
        let v = serde_json::to_value(manifest(&sha, 1)).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            [
                "byte_length",
                "camera_id",
                "captured_at",
                "content_sha256",
                "modality",
                "sequence_no",
                "station_id"
            ]
        );
        assert_eq!(v["modality"], "visual");
    }

    #[test]
    fn unparseable_timestamp_is_validation_error() {
        let text = r#"{"station_id":"s","camera_id":"c","captured_at":"yesterday",
            "content_sha256":"00","byte_length":1,"modality":"visual","sequence_no":0}"#;
        assert!(matches!(
            UploadManifest::from_json(text),
            Err(IngestError::Validation(_))
        ));
    }

    #[test]
    fn registry_rejects_duplicates() {
        let cam = CameraSource {
            camera_id: "c1".into(),
            site_name: "Kruger north".into(),
            region: "sub-saharan-africa".into(),
            realtime: true,
            zone_id: None,
            modality: Modality::Thermal,
        };
        let mut reg = CameraRegistry::new();
        reg.insert(cam.clone()).unwrap();
        assert!(matches!(reg.insert(cam), Err(IngestError::DuplicateCamera(_))));
    }
}

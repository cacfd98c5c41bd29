use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use wildtrap::ingest::BlobStore;
use wildtrap::pipeline::{DetectorBackend, SyntheticBackend};

use crate::remote::RemoteBackend;
use crate::BackendArgs;

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    SyntheticTruth,
    Empty,
    Remote(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic-truth" => Ok(Self::SyntheticTruth),
            "empty" => Ok(Self::Empty),
            url if url.starts_with("http://") || url.starts_with("https://") => {
                Ok(Self::Remote(url.to_string()))
            }
            other => Err(format!(
                "unknown backend `{other}` (expected synthetic-truth, empty or an http URL)"
            )),
        }
    }
}

pub fn build(args: &BackendArgs, blobs: &BlobStore) -> Arc<dyn DetectorBackend> {
    match &args.backend {
        BackendSpec::SyntheticTruth => Arc::new(SyntheticBackend::truth(
            blobs.clone(),
            args.jitter_px,
            args.seed,
        )),
        BackendSpec::Empty => Arc::new(SyntheticBackend::fixed(Vec::new())),
        BackendSpec::Remote(url) => Arc::new(RemoteBackend::new(
            url,
            Duration::from_millis(args.detector_timeout_ms),
        )),
    }
}
